#pragma once

// Scenario documents: JSON <-> ModelSpec, plus a content fingerprint.

#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "superspine/errors.hpp"
#include "superspine/model.hpp"

namespace superspine {

using json = nlohmann::json;

namespace detail {

/// Numbers may be written literally or as "pi", "2*pi", "pi/2", "-pi".
inline double parse_number(const json& v, const std::string& path) {
  if (v.is_number()) return v.get<double>();
  if (!v.is_string()) throw ScenarioError(path, "expected a number");
  std::string s = v.get<std::string>();
  s.erase(std::remove(s.begin(), s.end(), ' '), s.end());
  double sign = 1.0;
  if (!s.empty() && s[0] == '-') {
    sign = -1.0;
    s.erase(0, 1);
  }
  const auto pos = s.find("pi");
  if (pos == std::string::npos) throw ScenarioError(path, "unrecognized numeric expression '" + s + "'");
  double mult = 1.0, div = 1.0;
  try {
    if (pos > 0) {
      if (s[pos - 1] != '*') throw ScenarioError(path, "expected 'k*pi'");
      mult = std::stod(s.substr(0, pos - 1));
    }
    const std::string rest = s.substr(pos + 2);
    if (!rest.empty()) {
      if (rest[0] != '/') throw ScenarioError(path, "expected 'pi/k'");
      div = std::stod(rest.substr(1));
    }
  } catch (const std::logic_error&) {
    throw ScenarioError(path, "unrecognized numeric expression '" + v.get<std::string>() + "'");
  }
  return sign * mult * std::numbers::pi / div;
}

inline const json& require(const json& obj, const char* key, const std::string& path) {
  if (!obj.is_object()) throw ScenarioError(path, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw ScenarioError(path + "." + key, "missing required field");
  return *it;
}

inline double number_field(const json& obj, const char* key, const std::string& path) {
  return parse_number(require(obj, key, path), path + "." + key);
}

inline double number_field_or(const json& obj, const char* key, double dflt, const std::string& path) {
  auto it = obj.find(key);
  return it == obj.end() ? dflt : parse_number(*it, path + "." + key);
}

inline std::vector<double> number_list(const json& v, const std::string& path) {
  if (!v.is_array()) throw ScenarioError(path, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t k = 0; k < v.size(); ++k) out.push_back(parse_number(v[k], path + "[" + std::to_string(k) + "]"));
  return out;
}

inline Field parse_field(const json& v, const std::string& path) {
  if (v.is_number() || v.is_string()) return Field(parse_number(v, path));
  if (!v.is_object()) throw ScenarioError(path, "expected a number or a field object");
  const std::string kind = require(v, "kind", path).get<std::string>();
  if (kind == "constant") return Field(ConstantField{number_field(v, "value", path)});
  if (kind == "affine") return Field(AffineField{number_field(v, "c0", path), number_field(v, "c1", path)});
  if (kind == "cosine")
    return Field(CosineField{number_field(v, "mean", path), number_field(v, "amp", path),
                             number_field_or(v, "freq", 1.0, path), number_field_or(v, "phase", 0.0, path)});
  if (kind == "table") {
    TableField t{number_list(require(v, "x", path), path + ".x"), number_list(require(v, "y", path), path + ".y")};
    if (t.x.size() != t.y.size() || t.x.size() < 2)
      throw ScenarioError(path, "table needs matching x and y with at least two points");
    for (std::size_t k = 1; k < t.x.size(); ++k)
      if (!(t.x[k] > t.x[k - 1])) throw ScenarioError(path + ".x", "abscissae must be strictly increasing");
    return Field(std::move(t));
  }
  throw ScenarioError(path + ".kind", "unknown field kind '" + kind + "'");
}

inline json field_to_json(const Field& f) {
  return std::visit(
      [](const auto& r) -> json {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, ConstantField>) return r.value;
        else if constexpr (std::is_same_v<T, AffineField>) return {{"kind", "affine"}, {"c0", r.c0}, {"c1", r.c1}};
        else if constexpr (std::is_same_v<T, CosineField>)
          return {{"kind", "cosine"}, {"mean", r.mean}, {"amp", r.amp}, {"freq", r.freq}, {"phase", r.phase}};
        else return {{"kind", "table"}, {"x", r.x}, {"y", r.y}};
      },
      f.repr());
}

inline std::vector<Field> parse_type_fields(const json& v, std::size_t K, const std::string& path) {
  if (!v.is_array()) return std::vector<Field>(K, parse_field(v, path));
  if (v.size() != K) throw ScenarioError(path, "expected K=" + std::to_string(K) + " entries");
  std::vector<Field> out;
  for (std::size_t k = 0; k < K; ++k) out.push_back(parse_field(v[k], path + "[" + std::to_string(k) + "]"));
  return out;
}

inline TypeKernel parse_kernel(const json& v, const std::string& path) {
  const std::string fam = require(v, "family", path).get<std::string>();
  TypeKernel tk;
  if (auto it = v.find("spatial_weight"); it != v.end()) tk.spatial_weight = parse_field(*it, path + ".spatial_weight");
  if (fam == "point_mass") {
    tk.kernel = OffspringKernel(PointMass{number_field(v, "u0", path), number_field_or(v, "mass", 1.0, path)});
  } else if (fam == "finite_mixture") {
    FiniteMixture fm{number_list(require(v, "weights", path), path + ".weights"),
                     number_list(require(v, "atoms", path), path + ".atoms")};
    if (fm.weights.size() != fm.atoms.size() || fm.atoms.empty())
      throw ScenarioError(path, "weights and atoms must be non-empty and of equal length");
    tk.kernel = OffspringKernel(std::move(fm));
  } else if (fam == "pareto_log") {
    ParetoLog p{number_field(v, "c", path), number_field(v, "beta", path),
                number_field_or(v, "u_min", std::numbers::e, path)};
    if (!(p.beta > 1.0)) throw ScenarioError(path + ".beta", "pareto_log requires beta > 1");
    if (!(p.u_min >= std::numbers::e)) throw ScenarioError(path + ".u_min", "pareto_log requires u_min >= e");
    if (!(p.c > 0.0)) throw ScenarioError(path + ".c", "pareto_log requires c > 0");
    tk.kernel = OffspringKernel(p);
  } else {
    throw ScenarioError(path + ".family", "unknown kernel family '" + fam + "'");
  }
  return tk;
}

inline json kernel_to_json(const TypeKernel& tk) {
  json out = std::visit(
      [](const auto& f) -> json {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, PointMass>) return {{"family", "point_mass"}, {"u0", f.u0}, {"mass", f.mass}};
        else if constexpr (std::is_same_v<T, FiniteMixture>)
          return {{"family", "finite_mixture"}, {"weights", f.weights}, {"atoms", f.atoms}};
        else return {{"family", "pareto_log"}, {"c", f.c}, {"beta", f.beta}, {"u_min", f.u_min}};
      },
      tk.kernel.family());
  if (!(tk.spatial_weight.is_constant() && tk.spatial_weight(0.0) == 1.0)) out["spatial_weight"] = field_to_json(tk.spatial_weight);
  return out;
}

}  // namespace detail

/// Builds a ModelSpec from a parsed scenario document. Structural problems
/// raise ScenarioError naming the JSON path; model invariants are left to validate().
inline ModelSpec scenario_from_json(const json& doc) {
  ModelSpec spec;
  spec.name = doc.value("name", std::string("unnamed"));
  const json& Kj = detail::require(doc, "K", "$");
  if (!Kj.is_number_integer() || Kj.get<long>() < 2) throw ScenarioError("$.K", "K must be an integer >= 2");
  spec.K = Kj.get<std::size_t>();

  const json& dom = detail::require(doc, "domain", "$");
  const std::string kind = detail::require(dom, "kind", "$.domain").get<std::string>();
  const auto bounds = detail::number_list(detail::require(dom, "bounds", "$.domain"), "$.domain.bounds");
  if (kind == "interval") {
    if (bounds.size() != 2) throw ScenarioError("$.domain.bounds", "interval needs [x_lo, x_hi]");
    if (!(bounds[0] < bounds[1])) throw ScenarioError("$.domain.bounds", "x_lo must be < x_hi");
    spec.domain = Interval{bounds[0], bounds[1]};
  } else if (kind == "rectangle") {
    if (bounds.size() != 4) throw ScenarioError("$.domain.bounds", "rectangle needs [x_lo, x_hi, y_lo, y_hi]");
    spec.domain = Rectangle{bounds[0], bounds[1], bounds[2], bounds[3]};
  } else {
    throw ScenarioError("$.domain.kind", "unknown domain kind '" + kind + "'");
  }

  const json& co = detail::require(doc, "coefficients", "$");
  spec.coeffs.b = detail::parse_type_fields(detail::require(co, "b", "$.coefficients"), spec.K, "$.coefficients.b");
  spec.coeffs.n = detail::parse_type_fields(detail::require(co, "n", "$.coefficients"), spec.K, "$.coefficients.n");
  spec.coeffs.a = detail::parse_type_fields(detail::require(co, "a", "$.coefficients"), spec.K, "$.coefficients.a");
  const json& pj = detail::require(co, "p", "$.coefficients");
  if (!pj.is_array() || pj.size() != spec.K) throw ScenarioError("$.coefficients.p", "p must be a K x K array");
  for (std::size_t i = 0; i < spec.K; ++i) {
    const std::string row = "$.coefficients.p[" + std::to_string(i) + "]";
    if (!pj[i].is_array() || pj[i].size() != spec.K) throw ScenarioError(row, "row must have K entries");
    std::vector<Field> r;
    for (std::size_t j = 0; j < spec.K; ++j) r.push_back(detail::parse_field(pj[i][j], row + "[" + std::to_string(j) + "]"));
    spec.coeffs.p.push_back(std::move(r));
  }

  const json& kj = detail::require(doc, "kernel", "$");
  if (kj.is_array()) {
    if (kj.size() != spec.K) throw ScenarioError("$.kernel", "expected one kernel per type");
    for (std::size_t i = 0; i < spec.K; ++i) spec.kernels.push_back(detail::parse_kernel(kj[i], "$.kernel[" + std::to_string(i) + "]"));
  } else {
    spec.kernels.assign(spec.K, detail::parse_kernel(kj, "$.kernel"));
  }

  const std::string conv = doc.value("convention", std::string("pre_jump"));
  if (conv == "pre_jump") spec.convention = JumpConvention::PreJump;
  else if (conv == "post_jump") spec.convention = JumpConvention::PostJump;
  else throw ScenarioError("$.convention", "expected 'pre_jump' or 'post_jump'");
  return spec;
}

inline json scenario_to_json(const ModelSpec& spec) {
  json doc;
  doc["name"] = spec.name;
  doc["K"] = spec.K;
  if (const auto* iv = std::get_if<Interval>(&spec.domain)) {
    doc["domain"] = {{"kind", "interval"}, {"bounds", {iv->lo, iv->hi}}};
  } else {
    const auto& r = std::get<Rectangle>(spec.domain);
    doc["domain"] = {{"kind", "rectangle"}, {"bounds", {r.x_lo, r.x_hi, r.y_lo, r.y_hi}}};
  }
  auto fields = [](const std::vector<Field>& fs) {
    json a = json::array();
    for (const auto& f : fs) a.push_back(detail::field_to_json(f));
    return a;
  };
  doc["coefficients"]["b"] = fields(spec.coeffs.b);
  doc["coefficients"]["n"] = fields(spec.coeffs.n);
  doc["coefficients"]["a"] = fields(spec.coeffs.a);
  json p = json::array();
  for (const auto& row : spec.coeffs.p) p.push_back(fields(row));
  doc["coefficients"]["p"] = p;
  json k = json::array();
  for (const auto& tk : spec.kernels) k.push_back(detail::kernel_to_json(tk));
  doc["kernel"] = k;
  doc["convention"] = to_string(spec.convention);
  return doc;
}

/// Parses scenario text; JSON syntax errors report line and column.
inline ModelSpec parse_scenario(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    // Translate the byte offset into line:column.
    std::size_t line = 1, col = 1;
    for (std::size_t k = 0; k + 1 < e.byte && k < text.size(); ++k) {
      if (text[k] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ScenarioError("line " + std::to_string(line) + ", column " + std::to_string(col), e.what());
  }
  try {
    return scenario_from_json(doc);
  } catch (const json::type_error& e) {
    throw ScenarioError("$", e.what());
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ScenarioError(path, "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ModelSpec load_scenario(const std::string& path) { return parse_scenario(read_text_file(path)); }

inline std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, data.data(), data.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int k = 0; k < len; ++k) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[k]);
  return os.str();
}

/// Hash of the canonical serialization, so formatting and key order do not matter.
inline std::string fingerprint(const ModelSpec& spec) { return sha256_hex(scenario_to_json(spec).dump()); }

}  // namespace superspine
