// SPDX-License-Identifier: Apache-2.0
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "rankuncert/training.hpp"

namespace rankuncert {

std::string_view precision_name(Precision p) {
  return p == Precision::kFloat32 ? "float32" : "float64";
}

Precision parse_precision(std::string_view name) {
  if (name == "float32") return Precision::kFloat32;
  if (name == "float64") return Precision::kFloat64;
  throw ConfigError("unknown precision '" + std::string(name) + "' (float32, float64)");
}

Ablation Ablation::preset(std::string_view name) {
  if (name == "baseline") return {false, false, false};
  if (name == "csu") return {false, true, false};
  if (name == "isu") return {true, false, false};
  if (name == "isu_csu") return {true, true, false};
  if (name == "full") return {true, true, true};
  throw ConfigError("unknown ablation '" + std::string(name) +
                    "' (baseline, csu, isu, isu_csu, full)");
}

std::string Ablation::name() const {
  for (const char* n : {"baseline", "csu", "isu", "isu_csu", "full"}) {
    if (preset(n) == *this) return n;
  }
  return "custom";
}

namespace {

void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError(field + ": " + message);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_ks(const std::vector<int>& ks) {
  std::string out;
  for (std::size_t i = 0; i < ks.size(); ++i) out += (i ? "," : "") + std::to_string(ks[i]);
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& field, const std::string& raw, const char* what) {
  const std::string s = trim(raw);
  T value{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError(field + ": expected " + what + ", got '" + raw + "'");
  }
  return value;
}

int parse_int(const std::string& field, const std::string& raw) {
  return parse_number<int>(field, raw, "an integer");
}

double parse_double(const std::string& field, const std::string& raw) {
  const double v = parse_number<double>(field, raw, "a number");
  require(std::isfinite(v), field, "must be finite");
  return v;
}

bool parse_bool(const std::string& field, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(field + ": expected true or false, got '" + raw + "'");
}

std::vector<int> parse_ks(const std::string& field, const std::string& raw) {
  std::vector<int> ks;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) ks.push_back(parse_int(field, item));
  return ks;
}

template <class F>
auto rethrow_as(const std::string& field, F&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (what.rfind(field, 0) == 0) throw;
    throw ConfigError(field + ": " + what);
  }
}

using Setter = std::function<void(TrainConfig&, const std::string& field, const std::string& raw)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"training.batch_size",
       [](TrainConfig& c, const auto& f, const auto& v) { c.batch_size = parse_int(f, v); }},
      {"training.epochs",
       [](TrainConfig& c, const auto& f, const auto& v) { c.epochs = parse_int(f, v); }},
      {"training.seed",
       [](TrainConfig& c, const auto& f, const auto& v) {
         c.seed = parse_number<std::uint64_t>(f, v, "a non-negative integer");
       }},
      {"training.combiner",
       [](TrainConfig& c, const auto& f, const auto& v) {
         c.combiner = rethrow_as(f, [&] { return parse_combiner_mode(trim(v)); });
       }},
      {"training.ablation",
       [](TrainConfig& c, const auto& f, const auto& v) {
         c.ablation = rethrow_as(f, [&] { return Ablation::preset(trim(v)); });
       }},
      {"training.isu",
       [](TrainConfig& c, const auto& f, const auto& v) { c.ablation.isu = parse_bool(f, v); }},
      {"training.csu",
       [](TrainConfig& c, const auto& f, const auto& v) { c.ablation.csu = parse_bool(f, v); }},
      {"training.dr",
       [](TrainConfig& c, const auto& f, const auto& v) { c.ablation.dr = parse_bool(f, v); }},
      {"training.precision",
       [](TrainConfig& c, const auto& f, const auto& v) {
         c.precision = rethrow_as(f, [&] { return parse_precision(trim(v)); });
       }},
      {"training.eval_ks",
       [](TrainConfig& c, const auto& f, const auto& v) { c.eval_ks = parse_ks(f, v); }},
      {"training.selection_k",
       [](TrainConfig& c, const auto& f, const auto& v) { c.selection_k = parse_int(f, v); }},
      {"training.threads",
       [](TrainConfig& c, const auto& f, const auto& v) { c.threads = parse_int(f, v); }},
      {"optimizer.learning_rate",
       [](TrainConfig& c, const auto& f, const auto& v) {
         c.optimizer.learning_rate = parse_double(f, v);
       }},
      {"optimizer.beta1",
       [](TrainConfig& c, const auto& f, const auto& v) { c.optimizer.beta1 = parse_double(f, v); }},
      {"optimizer.beta2",
       [](TrainConfig& c, const auto& f, const auto& v) { c.optimizer.beta2 = parse_double(f, v); }},
      {"optimizer.eps",
       [](TrainConfig& c, const auto& f, const auto& v) { c.optimizer.eps = parse_double(f, v); }},
      {"optimizer.weight_decay",
       [](TrainConfig& c, const auto& f, const auto& v) {
         c.optimizer.weight_decay = parse_double(f, v);
       }},
      {"losses.theta_degrees",
       [](TrainConfig& c, const auto& f, const auto& v) { c.theta_degrees = parse_double(f, v); }},
      {"losses.exclude_diagonal_from_g",
       [](TrainConfig& c, const auto& f, const auto& v) {
         c.exclude_diagonal_from_g = parse_bool(f, v);
       }},
      {"uncertainty_augmenter.n_ua",
       [](TrainConfig& c, const auto& f, const auto& v) { c.n_ua = parse_int(f, v); }},
      {"uncertainty_augmenter.tokens",
       [](TrainConfig& c, const auto& f, const auto& v) { c.ua_tokens = parse_int(f, v); }},
      {"uncertainty_augmenter.separate_variance_head",
       [](TrainConfig& c, const auto& f, const auto& v) {
         c.separate_variance_head = parse_bool(f, v);
       }},
      {"uncertainty_augmenter.chain_from_f0",
       [](TrainConfig& c, const auto& f, const auto& v) { c.chain_from_f0 = parse_bool(f, v); }},
  };
  return table;
}

}  // namespace

void TrainConfig::validate() const {
  require(batch_size >= 1, "training.batch_size", "must be at least 1");
  require(!ablation.csu || batch_size >= 2, "training.batch_size",
          "must be at least 2 when cross-sample uncertainty is enabled");
  require(epochs >= 0, "training.epochs", "must be non-negative");
  require(!ablation.dr || ablation.isu, "training.dr",
          "distribution regularization needs the UA chains (isu)");
  require(!eval_ks.empty(), "training.eval_ks", "must list at least one K");
  for (int k : eval_ks) require(k >= 1, "training.eval_ks", "every K must be positive");
  require(std::find(eval_ks.begin(), eval_ks.end(), selection_k) != eval_ks.end(),
          "training.selection_k", "must be one of training.eval_ks");
  require(threads >= 1, "training.threads", "must be at least 1");
  require(optimizer.learning_rate >= 0.0, "optimizer.learning_rate", "must be non-negative");
  require(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0, "optimizer.beta1", "must be in [0, 1)");
  require(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0, "optimizer.beta2", "must be in [0, 1)");
  require(optimizer.eps > 0.0, "optimizer.eps", "must be positive");
  require(optimizer.weight_decay >= 0.0, "optimizer.weight_decay", "must be non-negative");
  require(theta_degrees >= 0.0 && theta_degrees < 180.0, "losses.theta_degrees",
          "must be in [0, 180)");
  require(!ablation.isu || n_ua >= 1, "uncertainty_augmenter.n_ua",
          "must be at least 1 when the UA chains are enabled");
  require(n_ua >= 0, "uncertainty_augmenter.n_ua", "must be non-negative");
  require(ua_tokens >= 1, "uncertainty_augmenter.tokens", "must be at least 1");
}

ModelShape TrainConfig::model_shape(int dim) const {
  ModelShape shape;
  shape.dim = dim;
  shape.combiner = combiner;
  shape.ua_length = ua_length();
  shape.ua.tokens = ua_tokens;
  shape.ua.separate_variance_head = separate_variance_head;
  shape.ua.chain_from_f0 = chain_from_f0;
  return shape;
}

namespace {

std::string render_ini(const TrainConfig& c, bool with_threads) {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  std::ostringstream out;
  out << "[training]\n"
      << "batch_size = " << c.batch_size << "\n"
      << "epochs = " << c.epochs << "\n"
      << "seed = " << c.seed << "\n"
      << "combiner = " << combiner_mode_name(c.combiner) << "\n"
      << "isu = " << b(c.ablation.isu) << "\n"
      << "csu = " << b(c.ablation.csu) << "\n"
      << "dr = " << b(c.ablation.dr) << "\n"
      << "precision = " << precision_name(c.precision) << "\n"
      << "eval_ks = " << fmt_ks(c.eval_ks) << "\n"
      << "selection_k = " << c.selection_k << "\n";
  if (with_threads) out << "threads = " << c.threads << "\n";
  out << "\n[optimizer]\n"
      << "learning_rate = " << fmt_double(c.optimizer.learning_rate) << "\n"
      << "beta1 = " << fmt_double(c.optimizer.beta1) << "\n"
      << "beta2 = " << fmt_double(c.optimizer.beta2) << "\n"
      << "eps = " << fmt_double(c.optimizer.eps) << "\n"
      << "weight_decay = " << fmt_double(c.optimizer.weight_decay) << "\n"
      << "\n[losses]\n"
      << "theta_degrees = " << fmt_double(c.theta_degrees) << "\n"
      << "exclude_diagonal_from_g = " << b(c.exclude_diagonal_from_g) << "\n"
      << "\n[uncertainty_augmenter]\n"
      << "n_ua = " << c.n_ua << "\n"
      << "tokens = " << c.ua_tokens << "\n"
      << "separate_variance_head = " << b(c.separate_variance_head) << "\n"
      << "chain_from_f0 = " << b(c.chain_from_f0) << "\n";
  return out.str();
}

}  // namespace

std::string TrainConfig::to_ini() const { return render_ini(*this, true); }

std::uint64_t TrainConfig::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : render_ini(*this, false)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

TrainConfig parse_config_ini(std::string_view text, TrainConfig base) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(section + ": key outside of a section");
    for (const auto& [key, value] : body) {
      const std::string field = section + "." + key;
      auto it = setters().find(field);
      if (it == setters().end()) throw ConfigError(field + ": unknown key");
      it->second(base, field, value.data());
    }
  }
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config_ini(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace rankuncert
