#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace miml {

/// Output staged in a sibling "<target>.partial" path and renamed over
/// `target` on commit(). Destroying an uncommitted instance removes the
/// staging path, so failed runs leave nothing behind.
class AtomicOutput {
 public:
  explicit AtomicOutput(std::filesystem::path target, bool is_directory = true);
  ~AtomicOutput();
  AtomicOutput(const AtomicOutput&) = delete;
  AtomicOutput& operator=(const AtomicOutput&) = delete;

  const std::filesystem::path& path() const { return staging_; }
  const std::filesystem::path& target() const { return target_; }
  void commit();

 private:
  std::filesystem::path target_;
  std::filesystem::path staging_;
  bool committed_ = false;
};

void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

// Splits on commas; no quoting (keys and label names never contain commas).
std::vector<std::string> split_csv_line(std::string_view line);
std::vector<std::vector<std::string>> read_csv_rows(const std::filesystem::path& path);

// Shortest decimal string that round-trips the double.
std::string format_double(double value);

}  // namespace miml
