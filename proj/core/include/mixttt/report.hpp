#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace mixttt {

// Deterministic decimal formatting for report files.
std::string format_num(double v);
std::string format_num(std::size_t v);
std::string format_num(int v);
std::string hex64(std::uint64_t v);

// CSV writer; every file starts with a `# config_hash=<hex>` provenance line.
class CsvFile {
 public:
  CsvFile(const std::string& path, std::uint64_t config_hash);
  void header(const std::vector<std::string>& columns);
  void row(const std::vector<std::string>& cells);
  void close();

 private:
  std::ofstream f_;
  std::string path_;
};

// Minimal CSV reader for our own output (no quoting; skips '#' lines).
std::vector<std::vector<std::string>> read_csv(const std::string& path);

}  // namespace mixttt
