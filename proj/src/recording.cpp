#include "bstrat/recording.hpp"

#include "bstrat/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace bstrat {

using nlohmann::json;

namespace {

void write_f32_blob(const std::string& path, const std::vector<double>& values) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  std::vector<float> buf(values.size());
  for (size_t i = 0; i < values.size(); ++i) buf[i] = static_cast<float>(values[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw std::runtime_error("short write: " + path);
}

std::vector<double> read_f32_blob(const std::string& path, size_t expected) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  const auto bytes = static_cast<size_t>(f.tellg());
  if (bytes != expected * sizeof(float))
    throw std::runtime_error("blob size mismatch for " + path + ": have " +
                             std::to_string(bytes) + " bytes, manifest expects " +
                             std::to_string(expected * sizeof(float)));
  f.seekg(0);
  std::vector<float> buf(expected);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (!f) throw std::runtime_error("short read: " + path);
  std::vector<double> out(expected);
  for (size_t i = 0; i < expected; ++i) out[i] = static_cast<double>(buf[i]);
  return out;
}

json read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open manifest: " + path);
  json j;
  f >> j;
  return j;
}

void write_manifest(const std::string& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open manifest for writing: " + path);
  f << j.dump(2) << "\n";
}

void check_finite(const std::vector<double>& xs, const char* who) {
  for (double x : xs)
    if (!std::isfinite(x)) throw std::invalid_argument(std::string(who) + ": non-finite sample");
}

}  // namespace

void Recording::validate() const {
  if (channels < 0 || samples < 0) throw std::invalid_argument("Recording: negative shape");
  if (static_cast<size_t>(channels) != channel_ids.size())
    throw std::invalid_argument("Recording: channel_ids size != channels");
  if (signal.size() != static_cast<size_t>(channels) * static_cast<size_t>(samples))
    throw std::invalid_argument("Recording: signal size != channels*samples");
  if (!coords.empty() && coords.size() != static_cast<size_t>(channels))
    throw std::invalid_argument("Recording: coords size != channels");
  if (sample_rate_hz <= 0.0) throw std::invalid_argument("Recording: sample_rate_hz must be > 0");
}

void write_recording(const std::string& stem, const Recording& rec) {
  rec.validate();
  check_finite(rec.signal, "write_recording");
  json j;
  j["kind"] = "recording";
  j["channel_ids"] = rec.channel_ids;
  j["sample_rate_hz"] = rec.sample_rate_hz;
  j["reference_scheme"] = rec.reference_scheme;
  j["shape"] = {rec.channels, rec.samples};
  j["dtype"] = "f32le";
  if (!rec.coords.empty()) {
    json cs = json::array();
    for (const auto& c : rec.coords) cs.push_back({c[0], c[1], c[2]});
    j["coords"] = cs;
  }
  write_manifest(stem + ".json", j);
  write_f32_blob(stem + ".f32", rec.signal);
}

Recording read_recording(const std::string& stem) {
  json j = read_manifest(stem + ".json");
  if (j.value("kind", "") != "recording")
    throw std::runtime_error("read_recording: manifest kind is not 'recording'");
  if (j.value("dtype", "") != "f32le")
    throw std::runtime_error("read_recording: unsupported dtype '" + j.value("dtype", "") + "'");
  Recording rec;
  rec.channel_ids = j.at("channel_ids").get<std::vector<std::string>>();
  rec.sample_rate_hz = j.at("sample_rate_hz").get<double>();
  rec.reference_scheme = j.value("reference_scheme", "raw");
  const auto shape = j.at("shape").get<std::vector<int>>();
  if (shape.size() != 2) throw std::runtime_error("read_recording: shape must be [C, T]");
  rec.channels = shape[0];
  rec.samples = shape[1];
  if (j.contains("coords")) {
    for (const auto& c : j["coords"]) {
      if (c.size() != 3) throw std::runtime_error("read_recording: coords entries must be xyz");
      rec.coords.push_back({c[0].get<double>(), c[1].get<double>(), c[2].get<double>()});
    }
  }
  rec.signal = read_f32_blob(stem + ".f32",
                             static_cast<size_t>(rec.channels) * static_cast<size_t>(rec.samples));
  rec.validate();
  return rec;
}

void TrialBatch::validate() const {
  if (windows.ndim() != 3) throw std::invalid_argument("TrialBatch: windows must be [B,C,T]");
  const int B = windows.dim(0), C = windows.dim(1);
  if (labels.size() != static_cast<size_t>(B))
    throw std::invalid_argument("TrialBatch: labels size != B");
  for (int l : labels)
    if (l < 0 || static_cast<size_t>(l) >= label_space.size())
      throw std::invalid_argument("TrialBatch: label outside label_space");
  if (!syllables.empty() && syllables.size() != static_cast<size_t>(B))
    throw std::invalid_argument("TrialBatch: syllables size != B");
  if (!channel_ids.empty() && channel_ids.size() != static_cast<size_t>(C))
    throw std::invalid_argument("TrialBatch: channel_ids size != C");
}

void write_trials(const std::string& stem, const TrialBatch& trials) {
  trials.validate();
  check_finite(trials.windows.v, "write_trials");
  json j;
  j["kind"] = "trials";
  j["shape"] = trials.windows.shape;
  j["dtype"] = "f32le";
  j["labels"] = trials.labels;
  j["label_space"] = trials.label_space;
  j["syllables"] = trials.syllables;
  j["channel_ids"] = trials.channel_ids;
  j["sample_rate_hz"] = trials.sample_rate_hz;
  write_manifest(stem + ".json", j);
  write_f32_blob(stem + ".f32", trials.windows.v);
}

TrialBatch read_trials(const std::string& stem) {
  json j = read_manifest(stem + ".json");
  if (j.value("kind", "") != "trials")
    throw std::runtime_error("read_trials: manifest kind is not 'trials'");
  if (j.value("dtype", "") != "f32le")
    throw std::runtime_error("read_trials: unsupported dtype");
  TrialBatch t;
  const auto shape = j.at("shape").get<std::vector<int>>();
  if (shape.size() != 3) throw std::runtime_error("read_trials: shape must be [B,C,T]");
  t.windows = Tensor(shape);
  t.windows.v = read_f32_blob(stem + ".f32", static_cast<size_t>(t.windows.numel()));
  t.labels = j.at("labels").get<std::vector<int>>();
  t.label_space = j.at("label_space").get<std::vector<std::string>>();
  t.syllables = j.value("syllables", std::vector<std::vector<int>>{});
  t.channel_ids = j.value("channel_ids", std::vector<std::string>{});
  t.sample_rate_hz = j.value("sample_rate_hz", 0.0);
  t.validate();
  return t;
}

DatasetSplit split_trials(int n, double train_ratio, double val_ratio, double test_ratio,
                          uint64_t seed) {
  if (n < 10) throw std::invalid_argument("split_trials: need at least 10 trials");
  if (train_ratio < 0 || val_ratio < 0 || test_ratio < 0)
    throw std::invalid_argument("split_trials: negative ratio");
  if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
    throw std::invalid_argument("split_trials: ratios must sum to 1");
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  Rng rng(mix_seed(seed, 0x5117));
  rng.shuffle(idx);
  const int n_train = static_cast<int>(std::floor(n * train_ratio));
  const int n_val = static_cast<int>(std::floor(n * val_ratio));
  DatasetSplit s;
  s.train.assign(idx.begin(), idx.begin() + n_train);
  s.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  s.test.assign(idx.begin() + n_train + n_val, idx.end());
  return s;
}

}  // namespace bstrat
