#include "bstrat/metrics_log.hpp"

#include <fstream>
#include <stdexcept>

namespace bstrat {

void MetricsLog::write(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);  // binary: no newline translation anywhere
  if (!f) throw std::runtime_error("cannot write metrics log: " + path);
  f << joined();
  if (!f) throw std::runtime_error("short write: " + path);
}

MetricsLog MetricsLog::read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open metrics log: " + path);
  MetricsLog log;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) log.lines.push_back(line);
  }
  return log;
}

}  // namespace bstrat
