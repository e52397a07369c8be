/*
 * Copyright 2026 The pbcert Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "pbcert/data_pipeline.hpp"

#include <httplib.h>
#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pbcert/random.hpp"

namespace pbcert {
namespace {

namespace fs = std::filesystem;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (std::isspace(static_cast<unsigned char>(s.front())) != 0)) s.remove_prefix(1);
  while (!s.empty() && (std::isspace(static_cast<unsigned char>(s.back())) != 0)) s.remove_suffix(1);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) {
    s = s.substr(1, s.size() - 2);
  }
  return s;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string_view rest(line);
  if (!rest.empty() && rest.back() == '\r') rest.remove_suffix(1);
  while (true) {
    const auto comma = rest.find(',');
    fields.emplace_back(trim(rest.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  return fields;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

std::size_t resolve_label_column(const std::vector<std::string>& header, const std::string& label_column) {
  if (label_column.empty()) return header.size() - 1;
  const auto it = std::find(header.begin(), header.end(), label_column);
  if (it != header.end()) return static_cast<std::size_t>(it - header.begin());
  if (std::all_of(label_column.begin(), label_column.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; })) {
    const std::size_t idx = std::stoul(label_column);
    if (idx < header.size()) return idx;
  }
  throw DataError("unknown label column '" + label_column + "'");
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Splits "scheme://host[:port]/path?query" into the client address and the
// request target.
std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw DataError("malformed URL '" + url + "'");
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

Dataset parse_csv(std::istream& in, const std::string& label_column, std::string name) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      header = split_fields(line);
      break;
    }
  }
  if (header.size() < 2) throw DataError("CSV needs a header with at least two columns", line_no);
  const std::size_t label_idx = resolve_label_column(header, label_column);

  std::vector<double> values;
  std::vector<std::string> raw_labels;
  const std::size_t d = header.size() - 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::vector<std::string> fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw DataError("expected " + std::to_string(header.size()) + " fields, found " +
                          std::to_string(fields.size()),
                      line_no);
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      const std::string& cell = fields[c];
      if (cell.empty() || cell == "?") {
        throw DataError("missing value in column '" + header[c] + "'", line_no);
      }
      if (c == label_idx) {
        raw_labels.push_back(cell);
        continue;
      }
      double v = 0.0;
      if (!parse_double(cell, v)) {
        throw DataError("non-numeric value '" + cell + "' in column '" + header[c] + "'", line_no);
      }
      values.push_back(v);
    }
  }
  if (raw_labels.empty()) throw DataError("CSV has no data rows");

  std::vector<std::string> names(raw_labels.begin(), raw_labels.end());
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  double tmp = 0.0;
  if (std::all_of(names.begin(), names.end(), [&](const std::string& s) { return parse_double(s, tmp); })) {
    std::sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) {
      return std::strtod(a.c_str(), nullptr) < std::strtod(b.c_str(), nullptr);
    });
  }
  std::map<std::string, int> index;
  for (std::size_t k = 0; k < names.size(); ++k) index[names[k]] = static_cast<int>(k);

  Dataset ds;
  ds.name = std::move(name);
  ds.class_count = names.size();
  ds.label_names = std::move(names);
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c != label_idx) ds.feature_names.push_back(header[c]);
  }
  const auto n = static_cast<Eigen::Index>(raw_labels.size());
  ds.features = Eigen::Map<const Eigen::MatrixXd>(values.data(), static_cast<Eigen::Index>(d), n);
  ds.labels.reserve(raw_labels.size());
  for (const std::string& l : raw_labels) ds.labels.push_back(index.at(l));
  if (ds.size() < ds.class_count) throw DataError("fewer examples than classes");
  ds.validate();
  return ds;
}

Dataset load_csv(const std::string& path, const std::string& label_column) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_csv(in, label_column, fs::path(path).stem().string());
}

std::string default_cache_dir() {
  if (const char* env = std::getenv("PBCERT_CACHE_DIR"); env != nullptr && *env != '\0') return env;
  if (const char* home = std::getenv("HOME"); home != nullptr && *home != '\0') {
    return (fs::path(home) / ".cache" / "pbcert").string();
  }
  return ".pbcert-cache";
}

std::string default_openml_url_template() {
  if (const char* env = std::getenv("PBCERT_OPENML_URL"); env != nullptr && *env != '\0') return env;
  return "https://www.openml.org/data/get_csv/{id}";
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
  return os.str();
}

FetchResult fetch_openml(int dataset_id, const std::string& cache_dir, const FetchOptions& options) {
  const std::string id = std::to_string(dataset_id);
  const std::string name = "openml-" + id;
  const fs::path dir(cache_dir);
  const fs::path sidecar = dir / (name + ".json");

  FetchResult result;
  if (fs::exists(sidecar)) {
    const nlohmann::json meta = nlohmann::json::parse(read_file(sidecar));
    const fs::path file = dir / meta.at("file").get<std::string>();
    if (fs::exists(file)) {
      const std::string bytes = read_file(file);
      const std::string digest = sha256_hex(bytes);
      if (digest != meta.at("sha256").get<std::string>()) {
        throw DataError("checksum mismatch for cached " + file.string());
      }
      std::istringstream in(bytes);
      result.data = parse_csv(in, options.label_column, name);
      result.from_cache = true;
      result.path = file.string();
      result.sha256 = digest;
      return result;
    }
  }

  std::string url = options.url_template;
  for (auto pos = url.find("{id}"); pos != std::string::npos; pos = url.find("{id}")) url.replace(pos, 4, id);
  const auto [address, target] = split_url(url);
  httplib::Client client(address);
  client.set_follow_location(true);
  client.set_connection_timeout(15);
  client.set_read_timeout(120);
  const httplib::Result response = client.Get(target);
  if (!response) {
    throw DataError("download of OpenML dataset " + id + " failed (" + httplib::to_string(response.error()) +
                    ") and no cached copy exists");
  }
  if (response->status != 200) {
    throw DataError("download of OpenML dataset " + id + " returned HTTP " + std::to_string(response->status));
  }
  const std::string& bytes = response->body;
  const std::string digest = sha256_hex(bytes);

  fs::create_directories(dir);
  const std::string file_name = name + "-" + digest.substr(0, 16) + ".csv";
  {
    std::ofstream out(dir / file_name, std::ios::binary);
    out << bytes;
    if (!out) throw DataError("cannot write cache file in " + dir.string());
  }
  nlohmann::json meta = {{"source_id", dataset_id},
                         {"url", url},
                         {"sha256", digest},
                         {"file", file_name},
                         {"bytes", bytes.size()},
                         {"timestamp", utc_timestamp()}};
  std::ofstream(sidecar) << meta.dump(2) << '\n';

  std::istringstream in(bytes);
  result.data = parse_csv(in, options.label_column, name);
  result.path = (dir / file_name).string();
  result.sha256 = digest;
  return result;
}

Standardizer Standardizer::fit(const Dataset& fit_on) {
  if (fit_on.empty()) throw std::invalid_argument("cannot fit a standardiser on an empty dataset");
  Standardizer s;
  const double n = static_cast<double>(fit_on.size());
  s.mean_ = fit_on.features.rowwise().sum() / n;
  const Eigen::MatrixXd centred = fit_on.features.colwise() - s.mean_;
  s.scale_ = (centred.array().square().rowwise().sum() / n).sqrt().matrix();
  for (Eigen::Index i = 0; i < s.scale_.size(); ++i) {
    if (s.scale_[i] < 1e-12) s.scale_[i] = 1.0;
  }
  return s;
}

Dataset Standardizer::apply(const Dataset& ds) const {
  if (ds.features.rows() != mean_.size()) throw std::invalid_argument("feature dimension mismatch");
  Dataset out = ds;
  out.features = ((ds.features.colwise() - mean_).array().colwise() / scale_.array()).matrix();
  return out;
}

std::size_t floor_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

Split stratified_split(std::span<const int> labels, std::span<const std::size_t> pool, std::size_t count_a,
                       std::uint64_t seed) {
  if (count_a > pool.size()) throw std::invalid_argument("split size exceeds pool");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i : pool) by_class[labels[i]].push_back(i);

  struct Quota {
    int label;
    std::size_t take;
    std::size_t remainder;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [label, members] : by_class) {
    const std::size_t num = count_a * members.size();
    quotas.push_back({label, num / pool.size(), num % pool.size()});
    assigned += num / pool.size();
  }
  std::vector<std::size_t> order(quotas.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t k = 0; assigned < count_a; ++k) {
    ++quotas[order[k % order.size()]].take;
    ++assigned;
  }

  Split split;
  std::size_t q = 0;
  for (auto& [label, members] : by_class) {
    Engine engine = make_engine(seed, {stream_tag("stratified_split"), static_cast<std::uint64_t>(label)});
    std::shuffle(members.begin(), members.end(), engine);
    const std::size_t take = quotas[q++].take;
    split.part_a.insert(split.part_a.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
    split.part_b.insert(split.part_b.end(), members.begin() + static_cast<std::ptrdiff_t>(take), members.end());
  }
  std::sort(split.part_a.begin(), split.part_a.end());
  std::sort(split.part_b.begin(), split.part_b.end());
  return split;
}

Split stratified_split(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must lie in [0,1]");
  const auto hist = ds.class_histogram();
  for (std::size_t c = 0; c < hist.size(); ++c) {
    if (hist[c] == 0) throw DataError("class " + std::to_string(c) + " has no examples");
  }
  std::vector<std::size_t> pool(ds.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  return stratified_split(ds.labels, pool, floor_count(fraction, ds.size()), seed);
}

std::vector<std::size_t> removal_keep_indices(const Dataset& ds, double fraction, std::uint64_t seed,
                                              bool stratified) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("removal fraction must lie in [0,1)");
  const std::size_t n = ds.size();
  std::vector<std::size_t> keep(n);
  std::iota(keep.begin(), keep.end(), std::size_t{0});
  if (fraction == 0.0) return keep;
  const auto kept = static_cast<std::size_t>(std::llround((1.0 - fraction) * static_cast<double>(n)));
  const std::uint64_t removal_seed = derive_seed(seed, {stream_tag("remove_random")});
  if (stratified) {
    keep = stratified_split(ds.labels, keep, kept, removal_seed).part_a;
  } else {
    Engine engine(removal_seed);
    std::shuffle(keep.begin(), keep.end(), engine);
    keep.resize(kept);
    std::sort(keep.begin(), keep.end());
  }
  std::vector<std::size_t> present(ds.class_count, 0);
  for (std::size_t i : keep) ++present[static_cast<std::size_t>(ds.labels[i])];
  const auto hist = ds.class_histogram();
  for (std::size_t c = 0; c < present.size(); ++c) {
    if (hist[c] > 0 && present[c] == 0) {
      throw DataError("random removal eliminated class " + std::to_string(c) + "; use a different seed");
    }
  }
  return keep;
}

Dataset remove_random(const Dataset& ds, double fraction, std::uint64_t seed, bool stratified) {
  const auto keep = removal_keep_indices(ds, fraction, seed, stratified);
  return subset(ds, keep);
}

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::SelfCertified:
      return "self_certified";
    case Mode::TraditionalPnn:
      return "traditional_pnn";
    case Mode::TraditionalErm:
      return "traditional_erm";
  }
  return "unknown";
}

Mode parse_mode(std::string_view text) {
  for (Mode m : {Mode::SelfCertified, Mode::TraditionalPnn, Mode::TraditionalErm}) {
    if (text == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown mode '" + std::string(text) + "'");
}

void SplitSpec::validate() const {
  auto in_unit = [](double f) { return f >= 0.0 && f < 1.0; };
  if (!in_unit(test_fraction) || !in_unit(prior_fraction) || !in_unit(prior_val_fraction) ||
      !in_unit(removal_fraction)) {
    throw std::invalid_argument("split fractions must lie in [0,1)");
  }
  if (!(prior_fraction + prior_val_fraction < 1.0)) {
    throw std::invalid_argument("prior and prior-validation fractions must sum below 1");
  }
}

void Partition::check_invariants() const {
  const std::size_t n = data.size();
  std::vector<int> owner(n, -1);
  const std::vector<const std::vector<std::size_t>*> roles = {&s_pri, &s_prival, &s_cert, &test};
  for (std::size_t r = 0; r < roles.size(); ++r) {
    for (std::size_t i : *roles[r]) {
      if (i >= n) throw std::logic_error("partition index out of range");
      if (owner[i] != -1) throw std::logic_error("partition roles overlap");
      owner[i] = static_cast<int>(r);
    }
  }
  std::vector<char> in_full(n, 0);
  for (std::size_t i : s_full) {
    if (i >= n || in_full[i] != 0) throw std::logic_error("s_full has invalid or repeated indices");
    in_full[i] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const bool is_test = owner[i] == 3;
    if (is_test == (in_full[i] != 0)) throw std::logic_error("s_full and test must cover the data exactly once");
    if (mode != Mode::TraditionalErm && !is_test && owner[i] == -1) {
      throw std::logic_error("training example without a role");
    }
  }
  if (mode == Mode::SelfCertified && !test.empty()) throw std::logic_error("self-certified mode has no test set");
}

Partition make_partitions(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  Partition p;
  p.mode = spec.mode;
  p.data = remove_random(ds, spec.removal_fraction, spec.seed, spec.stratified_removal);
  const std::size_t n = p.data.size();

  std::vector<std::size_t> train(n);
  std::iota(train.begin(), train.end(), std::size_t{0});
  if (spec.mode != Mode::SelfCertified) {
    Split s = stratified_split(p.data, spec.test_fraction, derive_seed(spec.seed, {stream_tag("test_split")}));
    if (s.part_a.empty()) throw DataError("test split is empty");
    p.test = std::move(s.part_a);
    train = std::move(s.part_b);
  }
  if (train.empty()) throw DataError("training split is empty");
  p.s_full = train;

  if (spec.mode != Mode::TraditionalErm) {
    const std::size_t n_train = train.size();
    const std::size_t n_cert = floor_count(1.0 - spec.prior_fraction, n_train);
    Split cert = stratified_split(p.data.labels, train, n_cert, derive_seed(spec.seed, {stream_tag("cert_split")}));
    const std::size_t n_val = std::max<std::size_t>(1, floor_count(spec.prior_val_fraction, n_train));
    if (cert.part_a.empty()) throw DataError("certification split is empty");
    if (cert.part_b.size() <= n_val) throw DataError("prior split is too small for a validation slice");
    Split val = stratified_split(p.data.labels, cert.part_b, n_val, derive_seed(spec.seed, {stream_tag("prior_val_split")}));
    p.s_cert = std::move(cert.part_a);
    p.s_prival = std::move(val.part_a);
    p.s_pri = std::move(val.part_b);
  }
  p.check_invariants();
  return p;
}

GaussianBlobs GaussianBlobs::two_class(std::size_t dim, double distance, double noise_sd) {
  if (dim == 0) throw std::invalid_argument("dimension must be positive");
  GaussianBlobs b;
  b.noise_sd = noise_sd;
  Eigen::VectorXd c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  c[0] = distance / 2.0;
  b.centers = {-c, c};
  return b;
}

Dataset GaussianBlobs::sample(std::size_t n, std::uint64_t seed, std::string name) const {
  if (centers.size() < 2) throw std::invalid_argument("need at least two blob centres");
  Engine engine = make_engine(seed, {stream_tag("blobs")});
  NormalSampler normal(engine);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(centers.size()) - 1);
  const auto d = centers.front().size();
  Dataset ds;
  ds.name = std::move(name);
  ds.class_count = centers.size();
  for (std::size_t c = 0; c < centers.size(); ++c) ds.label_names.push_back(std::to_string(c));
  for (Eigen::Index k = 0; k < d; ++k) ds.feature_names.push_back("x" + std::to_string(k));
  ds.features.resize(d, static_cast<Eigen::Index>(n));
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = pick(engine);
    ds.labels[i] = y;
    for (Eigen::Index k = 0; k < d; ++k) {
      ds.features(k, static_cast<Eigen::Index>(i)) = centers[static_cast<std::size_t>(y)][k] + noise_sd * normal();
    }
  }
  return ds;
}

}  // namespace pbcert
