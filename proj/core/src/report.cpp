#include "mixttt/report.hpp"

#include <cstdio>
#include <sstream>

#include "mixttt/errors.hpp"

namespace mixttt {

std::string format_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::string format_num(std::size_t v) { return std::to_string(v); }
std::string format_num(int v) { return std::to_string(v); }

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

CsvFile::CsvFile(const std::string& path, std::uint64_t config_hash) : path_(path) {
  f_.open(path, std::ios::trunc);
  if (!f_) throw IoError("cannot open for writing: " + path);
  f_ << "# config_hash=" << hex64(config_hash) << "\n";
}

void CsvFile::header(const std::vector<std::string>& columns) { row(columns); }

void CsvFile::row(const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) f_ << ",";
    f_ << cells[i];
  }
  f_ << "\n";
  if (!f_) throw IoError("write failed: " + path_);
}

void CsvFile::close() { f_.close(); }

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace mixttt
