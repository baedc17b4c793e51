#include "gradflow/io.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdio>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>

#include <json.hpp>

namespace gradflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path with_suffix(const fs::path& p, const std::string& suffix) {
  return fs::path(p.string() + suffix);
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_double(const std::string& s, const fs::path& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0') {
    throw PersistenceError(where.string() + ": bad number '" + s + "'");
  }
  return v;
}

json net_to_json(const Net& net) {
  json layers = json::array();
  for (const auto& l : net.layers()) {
    layers.push_back({{"width", l.width},
                      {"activation", std::string(to_string(l.activation))},
                      {"bias", l.has_bias}});
  }
  return {{"input_dim", net.input_dim()}, {"layers", layers}};
}

Net net_from_json(const json& j) {
  std::vector<LayerSpec> layers;
  for (const auto& l : j.at("layers")) {
    layers.push_back({l.at("width").get<std::size_t>(),
                      activation_from_string(l.at("activation").get<std::string>()),
                      l.at("bias").get<bool>()});
  }
  return Net(j.at("input_dim").get<std::size_t>(), std::move(layers));
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw PersistenceError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw PersistenceError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PersistenceError("cannot write " + path.string());
  out << text;
  if (!out) throw PersistenceError("write failed: " + path.string());
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(s);
  while (std::getline(ss, field, sep)) out.push_back(field);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

std::vector<LayerSpec> parse_layers(const std::string& text) {
  std::vector<LayerSpec> layers;
  for (const auto& item : split(text, ',')) {
    const auto parts = split(item, ':');
    if (parts.empty() || parts.size() > 3) {
      throw std::invalid_argument("bad layer '" + item + "'");
    }
    LayerSpec l;
    std::size_t pos = 0;
    try {
      l.width = std::stoul(parts[0], &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != parts[0].size() || l.width == 0) {
      throw std::invalid_argument("bad layer width '" + parts[0] + "'");
    }
    if (parts.size() > 1) l.activation = activation_from_string(parts[1]);
    if (parts.size() > 2) {
      if (parts[2] == "bias") {
        l.has_bias = true;
      } else if (parts[2] != "nobias") {
        throw std::invalid_argument("bad bias flag '" + parts[2] + "'");
      }
    }
    layers.push_back(l);
  }
  if (layers.empty()) throw std::invalid_argument("empty layer list");
  return layers;
}

std::string format_layers(const std::vector<LayerSpec>& layers) {
  std::string out;
  for (const auto& l : layers) {
    if (!out.empty()) out += ',';
    out += std::to_string(l.width) + ':' + std::string(to_string(l.activation)) +
           (l.has_bias ? ":bias" : ":nobias");
  }
  return out;
}

void write_f64_le(const fs::path& path, const double* data, std::size_t n) {
  std::string bytes(n * 8, '\0');
  for (std::size_t i = 0; i < n; ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(data[i]);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  write_text(path, bytes);
}

std::vector<double> read_f64_le(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 8 != 0) {
    throw PersistenceError(path.string() + ": length " + std::to_string(bytes.size()) +
                           " is not a multiple of 8");
  }
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + b])) << (8 * b);
    }
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

void save_params(const Vector& theta, const fs::path& path, const std::optional<Net>& net,
                 std::uint64_t seed) {
  if (net && net->param_count() != static_cast<std::size_t>(theta.size())) {
    throw DimensionError("save_params: theta does not match the net");
  }
  write_f64_le(path, theta.data(), static_cast<std::size_t>(theta.size()));
  json side = {{"layout_version", kLayoutVersion},
               {"count", theta.size()},
               {"seed", seed},
               {"net", net ? net_to_json(*net) : json(nullptr)}};
  write_text(with_suffix(path, ".json"), side.dump(2) + "\n");
}

ParamsSidecar read_params_sidecar(const fs::path& path) {
  const fs::path side_path = with_suffix(path, ".json");
  const json j = read_json(side_path);
  ParamsSidecar side;
  try {
    side.layout_version = j.at("layout_version").get<int>();
    if (side.layout_version != kLayoutVersion) {
      throw PersistenceError(side_path.string() + ": layout version " +
                             std::to_string(side.layout_version) + ", expected " +
                             std::to_string(kLayoutVersion));
    }
    side.count = j.at("count").get<std::size_t>();
    side.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("net") && !j.at("net").is_null()) side.net = net_from_json(j.at("net"));
  } catch (const json::exception& e) {
    throw PersistenceError(side_path.string() + ": " + e.what());
  }
  return side;
}

Vector load_params(const fs::path& path, const Net* expected) {
  const ParamsSidecar side = read_params_sidecar(path);
  const std::vector<double> raw = read_f64_le(path);
  if (raw.size() != side.count) {
    throw PersistenceError(path.string() + ": length mismatch, file has " +
                           std::to_string(raw.size()) + " values, sidecar says " +
                           std::to_string(side.count));
  }
  if (expected) {
    if (!side.net) throw PersistenceError(path.string() + ": sidecar has no net shape");
    if (!(*side.net == *expected)) {
      throw PersistenceError(path.string() + ": net shape " +
                             format_layers(side.net->layers()) + " does not match " +
                             format_layers(expected->layers()));
    }
  }
  return Eigen::Map<const Vector>(raw.data(), static_cast<Eigen::Index>(raw.size()));
}

std::string sha256_hex(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw PersistenceError("cannot open " + file.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw PersistenceError("sha256: init failed");
  }
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    const auto got = in.gcount();
    if (got > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(got));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

fs::path save_trajectory(const Trajectory& traj, const fs::path& base) {
  const std::size_t k = traj.size();
  if (traj.states.size() != k || traj.losses.size() != k || traj.grad_norms.size() != k) {
    throw std::invalid_argument("save_trajectory: inconsistent trajectory");
  }
  if (k == 0) throw std::invalid_argument("save_trajectory: empty trajectory");
  const auto p = static_cast<std::size_t>(traj.states.front().size());

  const fs::path csv = with_suffix(base, ".csv");
  const fs::path bin = with_suffix(base, ".states.bin");
  const fs::path manifest = with_suffix(base, ".manifest.json");

  std::string text = "t,loss,grad_norm\n";
  for (std::size_t i = 0; i < k; ++i) {
    text += fmt(traj.times[i]) + ',' + fmt(traj.losses[i]) + ',' + fmt(traj.grad_norms[i]) + '\n';
  }
  write_text(csv, text);

  std::vector<double> flat;
  flat.reserve(k * p);
  for (const auto& s : traj.states) {
    if (static_cast<std::size_t>(s.size()) != p) {
      throw DimensionError("save_trajectory: snapshots differ in length");
    }
    flat.insert(flat.end(), s.data(), s.data() + p);
  }
  write_f64_le(bin, flat.data(), flat.size());

  json j = {{"layout_version", kLayoutVersion},
            {"snapshots", k},
            {"param_count", p},
            {"method", traj.method},
            {"terminated_by", std::string(to_string(traj.terminated_by))},
            {"accepted_steps", traj.accepted_steps},
            {"rejected_steps", traj.rejected_steps},
            {"work", {{"n_loss", traj.work.n_loss},
                      {"n_grad", traj.work.n_grad},
                      {"n_hess", traj.work.n_hess}}},
            {"files", {{"scalars", csv.filename().string()}, {"states", bin.filename().string()}}},
            {"sha256", {{"scalars", sha256_hex(csv)}, {"states", sha256_hex(bin)}}}};
  write_text(manifest, j.dump(2) + "\n");
  return manifest;
}

Trajectory load_trajectory(const fs::path& manifest, std::optional<std::size_t> expected_params) {
  const json j = read_json(manifest);
  Trajectory t;
  try {
    if (j.at("layout_version").get<int>() != kLayoutVersion) {
      throw PersistenceError(manifest.string() + ": unsupported layout version");
    }
    const auto k = j.at("snapshots").get<std::size_t>();
    const auto p = j.at("param_count").get<std::size_t>();
    if (expected_params && *expected_params != p) {
      throw PersistenceError(manifest.string() + ": trajectory has " + std::to_string(p) +
                             " parameters, expected " + std::to_string(*expected_params));
    }
    const fs::path dir = manifest.parent_path();
    const fs::path csv = dir / j.at("files").at("scalars").get<std::string>();
    const fs::path bin = dir / j.at("files").at("states").get<std::string>();
    for (const auto& [name, file] : {std::pair{"scalars", csv}, std::pair{"states", bin}}) {
      if (!fs::exists(file)) throw PersistenceError("missing trajectory file " + file.string());
      if (sha256_hex(file) != j.at("sha256").at(name).get<std::string>()) {
        throw PersistenceError("hash mismatch for " + file.string());
      }
    }

    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);
    if (line != "t,loss,grad_norm") throw PersistenceError(csv.string() + ": bad header");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = split(line, ',');
      if (f.size() != 3) throw PersistenceError(csv.string() + ": bad row '" + line + "'");
      t.times.push_back(parse_double(f[0], csv));
      t.losses.push_back(parse_double(f[1], csv));
      t.grad_norms.push_back(parse_double(f[2], csv));
    }
    const std::vector<double> flat = read_f64_le(bin);
    if (t.times.size() != k || flat.size() != k * p) {
      throw PersistenceError(manifest.string() + ": length mismatch with component files");
    }
    for (std::size_t i = 0; i < k; ++i) {
      t.states.emplace_back(Eigen::Map<const Vector>(flat.data() + i * p,
                                                     static_cast<Eigen::Index>(p)));
    }
    t.method = j.at("method").get<std::string>();
    t.terminated_by = termination_from_string(j.at("terminated_by").get<std::string>());
    t.accepted_steps = j.at("accepted_steps").get<std::uint64_t>();
    t.rejected_steps = j.at("rejected_steps").get<std::uint64_t>();
    t.work.n_loss = j.at("work").at("n_loss").get<std::uint64_t>();
    t.work.n_grad = j.at("work").at("n_grad").get<std::uint64_t>();
    t.work.n_hess = j.at("work").at("n_hess").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw PersistenceError(manifest.string() + ": " + e.what());
  }
  return t;
}

Dataset teacher_student_dataset(const Net& teacher, const ParamVector& teacher_theta,
                                std::size_t n, std::uint64_t seed) {
  check_compatible(teacher, teacher_theta);
  if (n == 0) throw std::invalid_argument("teacher_student_dataset: n must be > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  RowMatrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(teacher.input_dim()));
  for (auto& v : x.reshaped<Eigen::RowMajor>()) v = normal(rng);
  Dataset data(x, RowMatrix::Zero(x.rows(), static_cast<Eigen::Index>(teacher.output_dim())));
  data.targets = forward_batch(teacher, teacher_theta, data);
  return data;
}

Dataset load_dataset_csv(const fs::path& path, std::size_t input_dim) {
  std::ifstream in(path);
  if (!in) throw PersistenceError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw PersistenceError(path.string() + ": empty file");
  const std::size_t cols = split(line, ',').size();
  if (cols <= input_dim) {
    throw PersistenceError(path.string() + ": need more than " + std::to_string(input_dim) +
                           " columns");
  }
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != cols) {
      throw PersistenceError(path.string() + ": row " + std::to_string(rows + 2) + " has " +
                             std::to_string(f.size()) + " fields, expected " +
                             std::to_string(cols));
    }
    for (const auto& v : f) values.push_back(parse_double(v, path));
    ++rows;
  }
  if (rows == 0) throw PersistenceError(path.string() + ": no data rows");
  const auto r = static_cast<Eigen::Index>(rows);
  const Eigen::Map<const RowMatrix> all(values.data(), r, static_cast<Eigen::Index>(cols));
  const auto d = static_cast<Eigen::Index>(input_dim);
  return Dataset(all.leftCols(d), all.rightCols(static_cast<Eigen::Index>(cols) - d));
}

}  // namespace gradflow
