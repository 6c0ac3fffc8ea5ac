#include "multiformer/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "multiformer/errors.hpp"

namespace multiformer {

using nlohmann::json;

namespace {

const char* on_off(bool v) { return v ? "on" : "off"; }

std::string depth_mode_name(DepthMode m) {
  return m == DepthMode::kBaselineMinMax ? "baseline_minmax" : "learned_log";
}

std::string merge_name(DepthMerge m) {
  return m == DepthMerge::kCopyPaste ? "copy_paste" : "dynamic";
}

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split_dotted(const std::string& key) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : key) {
    if (c == '.') {
      parts.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(trim(cur));
  return parts;
}

// Strips a trailing comment that is not inside a string literal.
std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (c == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
    if (c == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

json parse_scalar(const std::string& raw, int line_no) {
  const std::string s = trim(raw);
  auto fail = [&](const std::string& what) {
    throw ConfigError("config line " + std::to_string(line_no) + ": " + what + " '" + s + "'");
  };
  if (s.empty()) fail("empty value");
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') fail("unterminated string");
    std::string out;
    for (size_t i = 1; i + 1 < s.size(); ++i) {
      if (s[i] == '\\' && i + 2 < s.size()) {
        char n = s[++i];
        out += n == 'n' ? '\n' : n == 't' ? '\t' : n;
      } else {
        out += s[i];
      }
    }
    return out;
  }
  if (s == "true") return true;
  if (s == "false") return false;
  if (s.front() == '[') {
    if (s.back() != ']') fail("unterminated array");
    json arr = json::array();
    std::string inner = s.substr(1, s.size() - 2);
    std::string cur;
    bool in_str = false;
    for (char c : inner) {
      if (c == '"') in_str = !in_str;
      if (c == ',' && !in_str) {
        if (!trim(cur).empty()) arr.push_back(parse_scalar(cur, line_no));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!trim(cur).empty()) arr.push_back(parse_scalar(cur, line_no));
    return arr;
  }
  std::string num;
  for (char c : s)
    if (c != '_') num += c;
  const bool is_float = num.find_first_of(".eE") != std::string::npos &&
                        num.find("0x") == std::string::npos;
  if (is_float) {
    size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(num, &pos);
    } catch (const std::exception&) {
      fail("invalid number");
    }
    if (pos != num.size()) fail("invalid number");
    return v;
  }
  int64_t v = 0;
  auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), v);
  if (ec != std::errc() || ptr != num.data() + num.size()) fail("invalid value");
  return v;
}

json* descend(json& root, const std::vector<std::string>& path, int line_no) {
  json* node = &root;
  for (const auto& p : path) {
    if (p.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (!node->contains(p)) (*node)[p] = json::object();
    node = &(*node)[p];
    if (!node->is_object())
      throw ConfigError("config line " + std::to_string(line_no) + ": '" + p +
                        "' is not a table");
  }
  return node;
}

void emit_table(std::ostringstream& out, const json& node, const std::string& prefix) {
  for (auto it = node.begin(); it != node.end(); ++it) {
    if (it->is_object()) continue;
    out << it.key() << " = " << it->dump() << "\n";
  }
  for (auto it = node.begin(); it != node.end(); ++it) {
    if (!it->is_object()) continue;
    const std::string name = prefix.empty() ? it.key() : prefix + "." + it.key();
    out << "\n[" << name << "]\n";
    emit_table(out, *it, name);
  }
}

bool compatible(const json& def, const json& val) {
  if (def.is_number()) return val.is_number();
  if (def.is_string()) return val.is_string() || (val.is_boolean() && (def == "on" || def == "off"));
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_array()) return val.is_array();
  if (def.is_object()) return val.is_object();
  return false;
}

json coerce(const json& def, const json& val) {
  if (def.is_string() && val.is_boolean()) return json(on_off(val.get<bool>()));
  if (def.is_number_integer() && val.is_number_float()) {
    const double d = val.get<double>();
    if (d != static_cast<double>(static_cast<int64_t>(d))) return val;
    return static_cast<int64_t>(d);
  }
  return val;
}

bool parse_on_off(const json& v, const std::string& key, std::vector<std::string>& errors) {
  if (v.is_boolean()) return v.get<bool>();
  const auto s = v.get<std::string>();
  if (s == "on" || s == "true") return true;
  if (s == "off" || s == "false") return false;
  errors.push_back(key + ": expected on|off, got '" + s + "'");
  return false;
}

}  // namespace

DecoderVariant parse_variant(const std::string& tag) {
  if (tag == "unified") return DecoderVariant::kUnified;
  if (tag == "parallel") return DecoderVariant::kParallel;
  if (tag == "concat") return DecoderVariant::kConcat;
  if (tag == "sequential") return DecoderVariant::kSequential;
  if (tag == "hybrid") return DecoderVariant::kHybrid;
  throw ConfigError("unknown decoder variant '" + tag + "'");
}

std::string to_string(DecoderVariant v) {
  switch (v) {
    case DecoderVariant::kUnified: return "unified";
    case DecoderVariant::kParallel: return "parallel";
    case DecoderVariant::kConcat: return "concat";
    case DecoderVariant::kSequential: return "sequential";
    case DecoderVariant::kHybrid: return "hybrid";
  }
  return "unknown";
}

const std::vector<DecoderVariant>& all_variants() {
  static const std::vector<DecoderVariant> v{DecoderVariant::kUnified, DecoderVariant::kParallel,
                                             DecoderVariant::kConcat, DecoderVariant::kSequential,
                                             DecoderVariant::kHybrid};
  return v;
}

json config_to_tree(const RunConfig& c) {
  json t;
  t["experiment"] = c.experiment;
  t["output_dir"] = c.output_dir;
  t["model"] = {{"P", c.model.P},
                {"N_D", c.model.N_D},
                {"backbone_channels", c.model.backbone_channels},
                {"ctx_stride", c.model.ctx_stride},
                {"variant", to_string(c.model.variant)},
                {"N_B", c.model.N_B},
                {"N_Q", c.model.N_Q},
                {"heads", c.model.heads},
                {"context_adapter", on_off(c.model.context_adapter)},
                {"query_init_variance", c.model.query_init_variance},
                {"num_classes", c.model.num_classes}};
  t["depth"] = {{"mode", depth_mode_name(c.depth.mode)},
                {"d_min", c.depth.d_min},
                {"d_max", c.depth.d_max},
                {"tau", c.depth.tau},
                {"merge", merge_name(c.depth.merge)},
                {"score_floor", c.depth.score_floor}};
  t["panoptic"] = {{"score_thresh", c.panoptic.score_thresh},
                   {"overlap_thresh", c.panoptic.overlap_thresh}};
  t["track"] = {{"s_min", c.track.s_min}};
  t["train"] = {{"steps", c.train.steps},
                {"lr", c.train.lr},
                {"batch", c.train.batch},
                {"seed", c.train.seed},
                {"lambda_mask", c.train.lambda_mask},
                {"lambda_class", c.train.lambda_class},
                {"lambda_depth", c.train.lambda_depth},
                {"points_per_mask", c.train.points_per_mask},
                {"deep_supervision", on_off(c.train.deep_supervision)},
                {"no_object_weight", c.train.no_object_weight},
                {"weight_decay", c.train.weight_decay},
                {"warmup_steps", c.train.warmup_steps},
                {"grad_clip", c.train.grad_clip},
                {"log_every", c.train.log_every},
                {"eval_every", c.train.eval_every},
                {"checkpoint_every", c.train.checkpoint_every}};
  t["eval"] = {{"kappa", c.eval.kappas}, {"lambda", c.eval.lambdas}};
  t["data"] = {{"root", c.data.root}, {"height", c.data.height}, {"width", c.data.width}};
  return t;
}

json default_config_tree() { return config_to_tree(RunConfig{}); }

void merge_config_tree(json& base, const json& overrides, std::vector<std::string>& errors,
                       const std::string& prefix) {
  for (auto it = overrides.begin(); it != overrides.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) {
      errors.push_back("unknown key '" + key + "'");
      continue;
    }
    json& slot = base[it.key()];
    if (slot.is_object()) {
      if (!it->is_object()) {
        errors.push_back("'" + key + "' must be a table");
        continue;
      }
      merge_config_tree(slot, *it, errors, key);
      continue;
    }
    if (!compatible(slot, *it)) {
      errors.push_back("'" + key + "' has wrong type (expected " + std::string(slot.type_name()) +
                       ", got " + it->type_name() + ")");
      continue;
    }
    slot = coerce(slot, *it);
  }
}

void apply_override(json& tree, const std::string& dotted_key, const std::string& value,
                    std::vector<std::string>& errors) {
  const auto path = split_dotted(dotted_key);
  json* node = &tree;
  for (size_t i = 0; i + 1 < path.size(); ++i) {
    if (!node->is_object() || !node->contains(path[i]) || !(*node)[path[i]].is_object()) {
      errors.push_back("unknown key '" + dotted_key + "'");
      return;
    }
    node = &(*node)[path[i]];
  }
  if (!node->contains(path.back()) || (*node)[path.back()].is_object()) {
    errors.push_back("unknown key '" + dotted_key + "'");
    return;
  }
  json& slot = (*node)[path.back()];
  json parsed;
  try {
    if (slot.is_string()) {
      parsed = value;
    } else if (slot.is_array()) {
      parsed = parse_scalar(value.front() == '[' ? value : "[" + value + "]", 0);
    } else {
      parsed = parse_scalar(value, 0);
    }
  } catch (const ConfigError&) {
    errors.push_back("'" + dotted_key + "': cannot parse '" + value + "'");
    return;
  }
  if (!compatible(slot, parsed)) {
    errors.push_back("'" + dotted_key + "' has wrong type (expected " +
                     std::string(slot.type_name()) + ")");
    return;
  }
  slot = coerce(slot, parsed);
}

RunConfig config_from_tree(const json& in) {
  std::vector<std::string> errors;
  json t = default_config_tree();
  merge_config_tree(t, in, errors);
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }

  RunConfig c;
  auto get = [&](const json& node, const char* key, auto& out) {
    using T = std::decay_t<decltype(out)>;
    out = node.at(key).get<T>();
  };
  c.experiment = t["experiment"].get<std::string>();
  c.output_dir = t["output_dir"].get<std::string>();

  const json& m = t["model"];
  get(m, "P", c.model.P);
  get(m, "N_D", c.model.N_D);
  get(m, "backbone_channels", c.model.backbone_channels);
  get(m, "ctx_stride", c.model.ctx_stride);
  try {
    c.model.variant = parse_variant(m["variant"].get<std::string>());
  } catch (const ConfigError& e) {
    errors.push_back(std::string("model.variant: ") + e.what());
  }
  get(m, "N_B", c.model.N_B);
  get(m, "N_Q", c.model.N_Q);
  get(m, "heads", c.model.heads);
  c.model.context_adapter = parse_on_off(m["context_adapter"], "model.context_adapter", errors);
  get(m, "query_init_variance", c.model.query_init_variance);
  get(m, "num_classes", c.model.num_classes);

  const json& d = t["depth"];
  const auto mode = d["mode"].get<std::string>();
  if (mode == "baseline_minmax") c.depth.mode = DepthMode::kBaselineMinMax;
  else if (mode == "learned_log") c.depth.mode = DepthMode::kLearnedLog;
  else errors.push_back("depth.mode: expected baseline_minmax|learned_log, got '" + mode + "'");
  get(d, "d_min", c.depth.d_min);
  get(d, "d_max", c.depth.d_max);
  get(d, "tau", c.depth.tau);
  const auto merge = d["merge"].get<std::string>();
  if (merge == "copy_paste") c.depth.merge = DepthMerge::kCopyPaste;
  else if (merge == "dynamic") c.depth.merge = DepthMerge::kDynamic;
  else errors.push_back("depth.merge: expected copy_paste|dynamic, got '" + merge + "'");
  get(d, "score_floor", c.depth.score_floor);

  get(t["panoptic"], "score_thresh", c.panoptic.score_thresh);
  get(t["panoptic"], "overlap_thresh", c.panoptic.overlap_thresh);
  get(t["track"], "s_min", c.track.s_min);

  const json& tr = t["train"];
  get(tr, "steps", c.train.steps);
  get(tr, "lr", c.train.lr);
  get(tr, "batch", c.train.batch);
  if (tr["seed"].is_number_integer() && tr["seed"].get<int64_t>() < 0)
    errors.push_back("train.seed must be >= 0");
  else
    c.train.seed = tr["seed"].get<uint64_t>();
  get(tr, "lambda_mask", c.train.lambda_mask);
  get(tr, "lambda_class", c.train.lambda_class);
  get(tr, "lambda_depth", c.train.lambda_depth);
  get(tr, "points_per_mask", c.train.points_per_mask);
  c.train.deep_supervision = parse_on_off(tr["deep_supervision"], "train.deep_supervision", errors);
  get(tr, "no_object_weight", c.train.no_object_weight);
  get(tr, "weight_decay", c.train.weight_decay);
  get(tr, "warmup_steps", c.train.warmup_steps);
  get(tr, "grad_clip", c.train.grad_clip);
  get(tr, "log_every", c.train.log_every);
  get(tr, "eval_every", c.train.eval_every);
  get(tr, "checkpoint_every", c.train.checkpoint_every);

  get(t["eval"], "kappa", c.eval.kappas);
  get(t["eval"], "lambda", c.eval.lambdas);
  get(t["data"], "root", c.data.root);
  get(t["data"], "height", c.data.height);
  get(t["data"], "width", c.data.width);

  // Semantic validation.
  const auto& mc = c.model;
  if (mc.P < 3) errors.push_back("model.P must be >= 3");
  if (static_cast<int>(mc.backbone_channels.size()) != mc.P)
    errors.push_back("model.backbone_channels must have model.P entries");
  for (int ch : mc.backbone_channels)
    if (ch < 1) errors.push_back("model.backbone_channels entries must be positive");
  if (mc.N_D < 1) errors.push_back("model.N_D must be positive");
  if (mc.heads < 1 || (mc.N_D >= 1 && mc.N_D % mc.heads != 0))
    errors.push_back("model.heads must divide model.N_D");
  if (mc.N_Q < 1) errors.push_back("model.N_Q must be positive");
  if (mc.N_B < 1) errors.push_back("model.N_B must be >= 1");
  if (mc.ctx_stride != 1 && mc.ctx_stride != 2 && mc.ctx_stride != 4)
    errors.push_back("model.ctx_stride must be 1, 2 or 4");
  if (mc.query_init_variance < 0) errors.push_back("model.query_init_variance must be >= 0");
  if (mc.num_classes < 1) errors.push_back("model.num_classes must be positive");
  if (!(c.depth.d_min < c.depth.d_max)) errors.push_back("depth.d_min must be < depth.d_max");
  if (!(c.depth.tau > 0)) errors.push_back("depth.tau must be > 0");
  if (c.train.steps < 0) errors.push_back("train.steps must be >= 0");
  if (c.train.batch < 1) errors.push_back("train.batch must be >= 1");
  if (!(c.train.lr > 0)) errors.push_back("train.lr must be > 0");
  if (c.train.points_per_mask < 0) errors.push_back("train.points_per_mask must be >= 0");
  for (int k : c.eval.kappas)
    if (k < 1) errors.push_back("eval.kappa entries must be >= 1");
  for (double l : c.eval.lambdas)
    if (!(l > 0)) errors.push_back("eval.lambda entries must be > 0");
  const int div = 1 << mc.P;
  if (c.data.height < 64 || c.data.width < 64)
    errors.push_back("data.height and data.width must be >= 64");
  else if (c.data.height % div != 0 || c.data.width % div != 0)
    errors.push_back("data.height and data.width must be divisible by 2^model.P");

  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return c;
}

json parse_toml(const std::string& text) {
  json root = json::object();
  json* table = &root;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']')
        throw ConfigError("config line " + std::to_string(line_no) + ": malformed table header");
      table = descend(root, split_dotted(s.substr(1, s.size() - 2)), line_no);
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    auto path = split_dotted(trim(s.substr(0, eq)));
    const std::string leaf = path.back();
    path.pop_back();
    json* node = descend(*table, path, line_no);
    if (leaf.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    (*node)[leaf] = parse_scalar(s.substr(eq + 1), line_no);
  }
  return root;
}

std::string emit_toml(const json& tree) {
  std::ostringstream out;
  emit_table(out, tree, "");
  return out.str();
}

RunConfig config_with_overrides(const RunConfig& base, const std::vector<std::string>& overrides) {
  json tree = config_to_tree(base);
  std::vector<std::string> errors;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) {
      errors.push_back("override '" + o + "' must look like key=value");
      continue;
    }
    apply_override(tree, trim(o.substr(0, eq)), trim(o.substr(eq + 1)), errors);
  }
  if (errors.empty()) return config_from_tree(tree);
  std::string msg = "invalid configuration:";
  for (const auto& e : errors) msg += "\n  - " + e;
  try {
    config_from_tree(tree);
  } catch (const ConfigError& e) {
    const std::string rest = e.what();
    const auto nl = rest.find('\n');
    if (nl != std::string::npos) msg += rest.substr(nl);
  }
  throw ConfigError(msg);
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  const json file_tree = parse_toml(ss.str());
  json tree = default_config_tree();
  std::vector<std::string> errors;
  merge_config_tree(tree, file_tree, errors);
  if (!errors.empty()) {
    std::string msg = "invalid configuration in '" + path + "':";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return config_with_overrides(config_from_tree(tree), overrides);
}

}  // namespace multiformer
