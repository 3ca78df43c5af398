#pragma once

// Flow checkpoints and append-only metric CSV files.
//
// Checkpoint layout: one JSON header line describing every flow's layers,
// then all parameters as little-endian float64 in flow order.

#include "craft/flows.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace craft {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kMetricsVersion = "craft-metrics v1";

namespace detail {

inline nlohmann::json layer_to_json(const LayerSpec& spec) {
  using nlohmann::json;
  auto parity = [](MaskParity p) { return p == MaskParity::even ? "even" : "odd"; };
  return std::visit(
      [&](const auto& s) -> json {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, IdentityLayer>) return {{"type", "identity"}, {"dim", s.dim}};
        else if constexpr (std::is_same_v<T, DiagAffineLayer>) return {{"type", "diag_affine"}, {"dim", s.dim}};
        else if constexpr (std::is_same_v<T, CouplingLayer>)
          return {{"type", "coupling"}, {"dim", s.dim}, {"hidden", s.hidden}, {"parity", parity(s.parity)}};
        else
          return {{"type", "conv_coupling"}, {"side", s.side}, {"kernel", s.kernel}, {"hidden", s.hidden}, {"parity", parity(s.parity)}};
      },
      spec);
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  const std::string type = j.at("type");
  auto parity = [&] { return j.at("parity").get<std::string>() == "even" ? MaskParity::even : MaskParity::odd; };
  if (type == "identity") return IdentityLayer{j.at("dim").get<int>()};
  if (type == "diag_affine") return DiagAffineLayer{j.at("dim").get<int>()};
  if (type == "coupling") return CouplingLayer{j.at("dim").get<int>(), j.at("hidden").get<int>(), parity()};
  if (type == "conv_coupling")
    return ConvCouplingLayer{j.at("side").get<int>(), j.at("kernel").get<int>(), j.at("hidden").get<int>(), parity()};
  throw std::runtime_error("checkpoint: unknown layer type '" + type + "'");
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated parameter block");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<Flow>& flows) {
  nlohmann::json h;
  h["format"] = "craft-flows";
  h["version"] = kCheckpointVersion;
  h["flows"] = nlohmann::json::array();
  for (const auto& f : flows) {
    nlohmann::json jf;
    jf["dim"] = f.dim();
    jf["family"] = to_string(f.family());
    jf["num_params"] = f.num_params();
    jf["layers"] = nlohmann::json::array();
    for (const auto& l : f.layers()) jf["layers"].push_back(detail::layer_to_json(l));
    h["flows"].push_back(jf);
  }
  os << h.dump() << '\n';
  for (const auto& f : flows)
    for (Eigen::Index i = 0; i < f.params().size(); ++i) detail::put_f64(os, f.params()[i]);
}

inline std::vector<Flow> read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("checkpoint: missing header");
  const auto h = nlohmann::json::parse(line);
  if (h.value("format", "") != "craft-flows") throw std::runtime_error("checkpoint: not a flow checkpoint");
  if (h.value("version", 0) != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
  std::vector<Flow> flows;
  for (const auto& jf : h.at("flows")) {
    std::vector<LayerSpec> layers;
    for (const auto& jl : jf.at("layers")) layers.push_back(detail::layer_from_json(jl));
    const int n = jf.at("num_params").get<int>();
    Vec p(n);
    for (int i = 0; i < n; ++i) p[i] = detail::get_f64(is);
    flows.emplace_back(jf.at("dim").get<int>(), std::move(layers), std::move(p));
  }
  return flows;
}

inline void save_flows(const std::string& path, const std::vector<Flow>& flows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  write_checkpoint(os, flows);
}

inline std::vector<Flow> load_flows(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path);
  return read_checkpoint(is);
}

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

/// Append-only CSV: a version comment line, a fixed column header, then one
/// flushed line per record.
class MetricsWriter {
 public:
  MetricsWriter(std::ostream& os, std::string kind, std::vector<std::string> columns)
      : os_(&os), columns_(std::move(columns)) {
    write_header(kind);
  }

  MetricsWriter(const std::string& path, std::string kind, std::vector<std::string> columns)
      : owned_(std::make_unique<std::ofstream>(path)), os_(owned_.get()), columns_(std::move(columns)) {
    if (!*owned_) throw std::runtime_error("cannot open metrics file " + path);
    write_header(kind);
  }

  const std::vector<std::string>& columns() const noexcept { return columns_; }

  void row(const std::vector<double>& values) {
    if (values.size() != columns_.size()) throw std::invalid_argument("metrics row has the wrong number of columns");
    for (std::size_t i = 0; i < values.size(); ++i) *os_ << (i ? "," : "") << format_double(values[i]);
    *os_ << '\n';
    os_->flush();
  }

 private:
  void write_header(const std::string& kind) {
    *os_ << "# " << kMetricsVersion << ' ' << kind << '\n';
    for (std::size_t i = 0; i < columns_.size(); ++i) *os_ << (i ? "," : "") << columns_[i];
    *os_ << '\n';
    os_->flush();
  }

  std::unique_ptr<std::ofstream> owned_;
  std::ostream* os_;
  std::vector<std::string> columns_;
};

}  // namespace craft
