#include "fp/binio.hpp"

#include <atomic>
#include <filesystem>
#include <functional>

namespace fp {

void atomic_write_file(const std::string& path,
                       const std::function<void(std::ostream&)>& writer) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  // Unique-enough temp name; rename within a directory is atomic on POSIX.
  static std::atomic<std::uint64_t> counter{0};
  const fs::path tmp =
      target.parent_path() /
      (target.filename().string() + ".tmp" + std::to_string(counter++));
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for write: " + tmp.string());
    writer(os);
    os.flush();
    if (!os) throw DataError("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

}  // namespace fp
