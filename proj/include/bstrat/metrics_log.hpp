#pragma once
// Line-delimited metric record stream.  One compact JSON object per line with
// lexicographically ordered keys, so identical runs produce byte-identical
// logs (the determinism acceptance check compares these strings directly).

#include <string>
#include <vector>

#include <json.hpp>

namespace bstrat {

struct MetricsLog {
  std::vector<std::string> lines;

  void add(const nlohmann::json& record) { lines.push_back(record.dump()); }

  std::string joined() const {
    std::string out;
    for (const auto& l : lines) {
      out += l;
      out += '\n';
    }
    return out;
  }

  void write(const std::string& path) const;
  static MetricsLog read(const std::string& path);
};

}  // namespace bstrat
