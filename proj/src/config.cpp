#include "prognet/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace prognet {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

FlatConfig FlatConfig::parse(const std::string& text) {
  FlatConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

FlatConfig FlatConfig::parse_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string FlatConfig::serialize() const {
  std::ostringstream os;
  for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
  return os.str();
}

bool FlatConfig::has(const std::string& key) const {
  for (const auto& [k, v] : kv_)
    if (k == key) return true;
  return false;
}

void FlatConfig::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : kv_)
    if (k == key) {
      v = value;
      return;
    }
  kv_.emplace_back(key, value);
}

void FlatConfig::set(const std::string& key, double value) { set(key, format_double(value)); }
void FlatConfig::set(const std::string& key, int64_t value) { set(key, std::to_string(value)); }
void FlatConfig::set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }

const std::string& FlatConfig::lookup(const std::string& key) const {
  for (const auto& [k, v] : kv_)
    if (k == key) return v;
  throw std::invalid_argument("config key not found: " + key);
}

std::string FlatConfig::get_string(const std::string& key) const { return lookup(key); }
double FlatConfig::get_double(const std::string& key) const { return std::stod(lookup(key)); }
int64_t FlatConfig::get_int(const std::string& key) const { return std::stoll(lookup(key)); }

bool FlatConfig::get_bool(const std::string& key) const {
  const std::string& v = lookup(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config key " + key + ": expected boolean, got '" + v + "'");
}

std::vector<int> FlatConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  std::stringstream ss(lookup(key));
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(trim(tok)));
  return out;
}

SplitSpec SplitSpec::parse(const std::string& text) {
  SplitSpec s;
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ':')) parts.push_back(tok);
  if (parts.empty()) throw std::invalid_argument("empty split spec");
  if (parts[0] == "fixed") {
    s.kind = Kind::Fixed;
    if (parts.size() > 1) s.val_fraction = std::stod(parts[1]);
  } else if (parts[0] == "kfold") {
    s.kind = Kind::KFold;
    if (parts.size() > 1) s.folds = std::stoi(parts[1]);
    if (parts.size() > 2) s.fold = std::stoi(parts[2]);
  } else if (parts[0] == "center-out") {
    s.kind = Kind::CenterOut;
    if (parts.size() > 1) s.test_center = parts[1];
    if (parts.size() > 2) s.folds = std::stoi(parts[2]);
    if (parts.size() > 3) s.fold = std::stoi(parts[3]);
  } else {
    throw std::invalid_argument("unknown split kind '" + parts[0] +
                                "' (want fixed, kfold or center-out)");
  }
  return s;
}

std::string SplitSpec::to_string() const {
  switch (kind) {
    case Kind::Fixed: return "fixed:" + format_double(val_fraction);
    case Kind::KFold: return "kfold:" + std::to_string(folds) + ":" + std::to_string(fold);
    case Kind::CenterOut:
      return "center-out:" + test_center + ":" + std::to_string(folds) + ":" +
             std::to_string(fold);
  }
  return "fixed";
}

RunConfig RunConfig::defaults() { return RunConfig{}; }

ModelConfig RunConfig::model_from_flat(const FlatConfig& cfg) {
  ModelConfig m;
  if (cfg.has("model.image_size")) m.image_h = m.image_w = static_cast<int>(cfg.get_int("model.image_size"));
  if (cfg.has("model.image_channels")) m.image_channels = static_cast<int>(cfg.get_int("model.image_channels"));
  if (cfg.has("model.cnn_channels")) m.cnn_channels = cfg.get_int_list("model.cnn_channels");
  if (cfg.has("model.cnn_blocks_per_stage"))
    m.cnn_blocks_per_stage = static_cast<int>(cfg.get_int("model.cnn_blocks_per_stage"));
  if (cfg.has("model.token_width")) m.token_width = static_cast<int>(cfg.get_int("model.token_width"));
  if (cfg.has("model.context_width")) m.context_width = static_cast<int>(cfg.get_int("model.context_width"));
  if (cfg.has("model.depth_diagnosis")) m.depth_diagnosis = static_cast<int>(cfg.get_int("model.depth_diagnosis"));
  if (cfg.has("model.depth_prognosis")) m.depth_prognosis = static_cast<int>(cfg.get_int("model.depth_prognosis"));
  if (cfg.has("model.heads")) m.heads = static_cast<int>(cfg.get_int("model.heads"));
  if (cfg.has("model.ffn_width")) m.ffn_width = static_cast<int>(cfg.get_int("model.ffn_width"));
  if (cfg.has("model.horizons")) m.horizons = static_cast<int>(cfg.get_int("model.horizons"));
  if (cfg.has("model.n_classes")) m.n_classes = static_cast<int>(cfg.get_int("model.n_classes"));
  if (cfg.has("model.dropout")) m.dropout = cfg.get_double("model.dropout");
  if (cfg.has("model.use_clinical")) m.use_clinical = cfg.get_bool("model.use_clinical");
  if (cfg.has("model.clinical_dim")) m.clinical_dim = static_cast<int>(cfg.get_int("model.clinical_dim"));
  if (cfg.has("model.detach_y0")) m.detach_y0 = cfg.get_bool("model.detach_y0");
  if (cfg.has("model.argmax_y0")) m.argmax_y0 = cfg.get_bool("model.argmax_y0");
  return m;
}

void RunConfig::model_to_flat(const ModelConfig& m, FlatConfig& cfg) {
  if (m.image_h != m.image_w)
    throw std::invalid_argument("config: only square images are configurable");
  cfg.set("model.image_size", static_cast<int64_t>(m.image_h));
  cfg.set("model.image_channels", static_cast<int64_t>(m.image_channels));
  std::string plan;
  for (size_t i = 0; i < m.cnn_channels.size(); ++i)
    plan += (i ? "," : "") + std::to_string(m.cnn_channels[i]);
  cfg.set("model.cnn_channels", plan);
  cfg.set("model.cnn_blocks_per_stage", static_cast<int64_t>(m.cnn_blocks_per_stage));
  cfg.set("model.token_width", static_cast<int64_t>(m.token_width));
  cfg.set("model.context_width", static_cast<int64_t>(m.context_width));
  cfg.set("model.depth_diagnosis", static_cast<int64_t>(m.depth_diagnosis));
  cfg.set("model.depth_prognosis", static_cast<int64_t>(m.depth_prognosis));
  cfg.set("model.heads", static_cast<int64_t>(m.heads));
  cfg.set("model.ffn_width", static_cast<int64_t>(m.ffn_width));
  cfg.set("model.horizons", static_cast<int64_t>(m.horizons));
  cfg.set("model.n_classes", static_cast<int64_t>(m.n_classes));
  cfg.set("model.dropout", m.dropout);
  cfg.set("model.use_clinical", m.use_clinical);
  cfg.set("model.clinical_dim", static_cast<int64_t>(m.clinical_dim));
  cfg.set("model.detach_y0", m.detach_y0);
  cfg.set("model.argmax_y0", m.argmax_y0);
}

RunConfig RunConfig::from_flat(const FlatConfig& cfg) {
  RunConfig rc;
  rc.model = model_from_flat(cfg);
  if (cfg.has("loss.w1")) rc.loss.w1 = cfg.get_double("loss.w1");
  if (cfg.has("loss.w2")) rc.loss.w2 = cfg.get_double("loss.w2");
  if (cfg.has("loss.w3")) rc.loss.w3 = cfg.get_double("loss.w3");
  if (cfg.has("loss.mtl")) rc.mtl = cfg.get_bool("loss.mtl");
  if (cfg.has("optim.lr")) rc.optim.lr = cfg.get_double("optim.lr");
  if (cfg.has("optim.beta1")) rc.optim.beta1 = cfg.get_double("optim.beta1");
  if (cfg.has("optim.beta2")) rc.optim.beta2 = cfg.get_double("optim.beta2");
  if (cfg.has("optim.eps")) rc.optim.eps = cfg.get_double("optim.eps");
  if (cfg.has("optim.weight_decay")) rc.optim.weight_decay = cfg.get_double("optim.weight_decay");
  if (cfg.has("data.manifest")) rc.data_manifest = cfg.get_string("data.manifest");
  if (cfg.has("data.synthetic")) rc.synthetic = cfg.get_bool("data.synthetic");
  if (cfg.has("data.transition_prob")) rc.transition_prob = cfg.get_double("data.transition_prob");
  if (cfg.has("data.synthetic_samples"))
    rc.synthetic_samples = static_cast<int>(cfg.get_int("data.synthetic_samples"));
  if (cfg.has("data.n_stages")) rc.n_stages = static_cast<int>(cfg.get_int("data.n_stages"));
  if (cfg.has("data.baseline_min_stage"))
    rc.baseline_min_stage = static_cast<int>(cfg.get_int("data.baseline_min_stage"));
  if (cfg.has("data.mask_fraction")) rc.mask_fraction = cfg.get_double("data.mask_fraction");
  if (cfg.has("split.spec")) rc.split = SplitSpec::parse(cfg.get_string("split.spec"));
  if (cfg.has("train.augment")) rc.augment = cfg.get_string("train.augment");
  if (cfg.has("train.epochs")) rc.epochs = static_cast<int>(cfg.get_int("train.epochs"));
  if (cfg.has("train.batch_size")) rc.batch_size = static_cast<int>(cfg.get_int("train.batch_size"));
  if (cfg.has("train.patience")) rc.patience = static_cast<int>(cfg.get_int("train.patience"));
  if (cfg.has("train.seed")) rc.seed = static_cast<uint64_t>(cfg.get_int("train.seed"));
  if (cfg.has("out.dir")) rc.out_dir = cfg.get_string("out.dir");
  return rc;
}

FlatConfig RunConfig::to_flat() const {
  FlatConfig cfg;
  model_to_flat(model, cfg);
  cfg.set("loss.w1", loss.w1);
  cfg.set("loss.w2", loss.w2);
  cfg.set("loss.w3", loss.w3);
  cfg.set("loss.mtl", mtl);
  cfg.set("optim.lr", optim.lr);
  cfg.set("optim.beta1", optim.beta1);
  cfg.set("optim.beta2", optim.beta2);
  cfg.set("optim.eps", optim.eps);
  cfg.set("optim.weight_decay", optim.weight_decay);
  cfg.set("data.manifest", data_manifest);
  cfg.set("data.synthetic", synthetic);
  cfg.set("data.transition_prob", transition_prob);
  cfg.set("data.synthetic_samples", static_cast<int64_t>(synthetic_samples));
  cfg.set("data.n_stages", static_cast<int64_t>(n_stages));
  cfg.set("data.baseline_min_stage", static_cast<int64_t>(baseline_min_stage));
  cfg.set("data.mask_fraction", mask_fraction);
  cfg.set("split.spec", split.to_string());
  cfg.set("train.augment", augment);
  cfg.set("train.epochs", static_cast<int64_t>(epochs));
  cfg.set("train.batch_size", static_cast<int64_t>(batch_size));
  cfg.set("train.patience", static_cast<int64_t>(patience));
  cfg.set("train.seed", static_cast<int64_t>(seed));
  cfg.set("out.dir", out_dir);
  return cfg;
}

}  // namespace prognet
