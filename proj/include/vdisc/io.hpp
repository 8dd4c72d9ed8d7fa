// Copyright 2026 The vdisc Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Small filesystem helpers: atomic writes, whole-file reads, checksums and
// an exclusive lock file.

#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

#include <fmt/format.h>

#include "vdisc/codec.hpp"
#include "vdisc/errors.hpp"

namespace vdisc::io {

namespace fs = std::filesystem;

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw NotFoundError(fmt::format("cannot open '{}'", p.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Temp files are dot-prefixed siblings so directory scans never see them.
inline fs::path temp_path_for(const fs::path& target) {
  static std::atomic<unsigned> counter{0};
  return target.parent_path() /
         fmt::format(".tmp-{}-{}-{}", ::getpid(), counter.fetch_add(1), target.filename().string());
}

inline void write_file(const fs::path& p, std::string_view data) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  out.flush();
  if (!out) throw Error(fmt::format("failed writing '{}'", p.string()));
}

/// Write-then-rename; readers observe either the old file or the new one.
inline void atomic_write(const fs::path& p, std::string_view data) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = temp_path_for(p);
  write_file(tmp, data);
  fs::rename(tmp, p);
}

inline std::string checksum(std::string_view data) { return codec::md5_hex(data); }

inline std::string file_checksum(const fs::path& p) { return checksum(read_file(p)); }

inline bool is_hidden(const fs::path& p) {
  const std::string name = p.filename().string();
  return !name.empty() && name.front() == '.';
}

/// Exclusive lock held for the lifetime of the object.
class LockFile {
 public:
  explicit LockFile(fs::path path) : path_(std::move(path)) {
    fs::create_directories(path_.parent_path());
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST) {
        throw PreconditionError(fmt::format(
            "'{}' exists: another run is in progress (remove it if that run died)", path_.string()));
      }
      throw Error(fmt::format("cannot create lock '{}': {}", path_.string(), std::strerror(errno)));
    }
    const std::string pid = std::to_string(::getpid());
    (void)!::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  LockFile(const LockFile&) = delete;
  LockFile& operator=(const LockFile&) = delete;
  ~LockFile() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

}  // namespace vdisc::io
