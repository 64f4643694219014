#include "fdtr/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace fdtr {

namespace {

template <class T>
T parse_num(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (!is || !(is >> std::ws).eof()) throw ContractError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ContractError("config: '" + key + "' expects on/off, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(v);
  while (std::getline(is, cur, ','))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

bool set_vit(ViTConfig& v, const std::string& full, const std::string& key, const std::string& value) {
  if (key == "image_size") v.image_size = parse_num<int>(full, value);
  else if (key == "patch_size") v.patch_size = parse_num<int>(full, value);
  else if (key == "depth") v.depth = parse_num<int>(full, value);
  else if (key == "dim") v.dim = parse_num<int>(full, value);
  else if (key == "heads") v.heads = parse_num<int>(full, value);
  else if (key == "mlp_ratio") v.mlp_ratio = parse_num<double>(full, value);
  else if (key == "strategy") v.strategy = parse_strategy(value);
  else if (key == "max_queries") v.max_queries = parse_num<int>(full, value);
  else if (key == "interpolate_pos") v.interpolate_pos = parse_bool(full, value);
  else return false;
  return true;
}

void vit_ini(std::ostringstream& os, const ViTConfig& v) {
  os << "image_size = " << v.image_size << "\npatch_size = " << v.patch_size << "\ndepth = " << v.depth
     << "\ndim = " << v.dim << "\nheads = " << v.heads << "\nmlp_ratio = " << v.mlp_ratio
     << "\nstrategy = " << to_string(v.strategy) << "\nmax_queries = " << v.max_queries
     << "\ninterpolate_pos = " << (v.interpolate_pos ? "on" : "off") << "\n";
}

}  // namespace

std::uint64_t RunConfig::resolved_seed() const {
  if (!seed) throw ContractError("config: a seed is mandatory (set run.seed, --seed or FDTR_SEED)");
  return *seed;
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.rfind('.', eq);
  if (eq == std::string::npos || dot == std::string::npos || dot == 0)
    throw ContractError("config: override '" + assignment + "' is not section.key=value");
  set(trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  const std::string full = section + "." + key;
  auto num_i = [&] { return parse_num<int>(full, value); };
  auto num_d = [&] { return parse_num<double>(full, value); };
  if (section == "run") {
    if (key == "seed") seed = parse_num<std::uint64_t>(full, value);
    else if (key == "data_dir") data_dir = value;
    else if (key == "val_dir") val_dir = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "checkpoint") checkpoint = value;
    else if (key == "workers") workers = num_i();
    else throw ContractError("config: unknown key '" + full + "'");
  } else if (section == "scene") {
    if (key == "canvas") scene.canvas = num_i();
    else if (key == "n") n_images = num_i();
    else if (key == "min_objects") scene.min_objects = num_i();
    else if (key == "max_objects") scene.max_objects = num_i();
    else if (key == "occlusion_rate") scene.occlusion_rate = num_d();
    else if (key == "cooccurrence") {
      scene.cooccurrence.assign(1, CooccurrenceRule{});
      scene.cooccurrence[0].probability = num_d();
    } else if (key == "distractors") scene.distractors = num_i();
    else if (key == "background_noise") scene.background_noise = num_d();
    else throw ContractError("config: unknown key '" + full + "'");
  } else if (section == "detector") {
    auto& d = detector;
    if (key == "input_size") d.input_size = num_i();
    else if (key == "num_classes") d.num_classes = num_i();
    else if (key == "hidden") d.hidden = num_i();
    else if (key == "queries") d.queries = num_i();
    else if (key == "enc_layers") d.enc_layers = num_i();
    else if (key == "dec_layers") d.dec_layers = num_i();
    else if (key == "heads") d.heads = num_i();
    else if (key == "points") d.points = num_i();
    else if (key == "ffn") d.ffn = num_i();
    else if (key == "image_queries") d.image_queries = num_i();
    else if (key == "fuse_patches") d.fuse_patches = parse_bool(full, value);
    else if (key == "self_query") d.self_query = parse_bool(full, value);
    else if (key == "enhancers") enhancers = num_i();
    else throw ContractError("config: unknown key '" + full + "'");
  } else if (section == "foundation") {
    if (key == "checkpoints") foundations = split_list(value);
    else if (key == "allow_trainable") allow_trainable_foundation = parse_bool(full, value);
    else if (!set_vit(vit, full, key, value)) throw ContractError("config: unknown key '" + full + "'");
  } else if (section.rfind("enhancer.", 0) == 0) {
    const int k = parse_num<int>(full, section.substr(9));
    if (k < 0 || k > 8) throw ContractError("config: enhancer index out of range in '" + full + "'");
    while (static_cast<int>(vit_overrides.size()) <= k) vit_overrides.push_back(vit);
    if (!set_vit(vit_overrides[static_cast<std::size_t>(k)], full, key, value))
      throw ContractError("config: unknown key '" + full + "'");
  } else if (section == "train") {
    if (key == "epochs") train.epochs = num_i();
    else if (key == "batch") train.batch = num_i();
    else if (key == "lr") train.lr = num_d();
    else if (key == "lr_drop") train.lr_drop = num_i();
    else if (key == "backbone_lr_mult") train.backbone_lr_mult = num_d();
    else if (key == "weight_decay") train.weight_decay = num_d();
    else if (key == "clip") train.clip = num_d();
    else if (key == "eval_every") train.eval_every = num_i();
    else if (key == "cache_foundation") train.cache_foundation = parse_bool(full, value);
    else if (key == "max_steps") train.max_steps = num_i();
    else throw ContractError("config: unknown key '" + full + "'");
  } else if (section == "pretrain") {
    if (key == "epochs") pretrain.epochs = num_i();
    else if (key == "batch") pretrain.batch = num_i();
    else if (key == "lr") pretrain.lr = num_d();
    else if (key == "random_frozen") pretrain.random_frozen = parse_bool(full, value);
    else if (key == "holdout") pretrain.holdout = num_d();
    else throw ContractError("config: unknown key '" + full + "'");
  } else if (section == "eval") {
    if (key == "score_threshold") score_threshold = num_d();
    else if (key == "error_threshold") error_threshold = num_d();
    else if (key == "level") vis_level = num_i();
    else if (key == "images") vis_images = num_i();
    else throw ContractError("config: unknown key '" + full + "'");
  } else {
    throw ContractError("config: unknown section '" + section + "'");
  }
}

void RunConfig::resolve() {
  if (enhancers < 0) throw ContractError("config: negative enhancer count");
  detector.enhancers.clear();
  // Enhancers only exist when one of the two enhancement paths uses them.
  if (detector.image_queries > 0 || detector.fuse_patches)
    for (int k = 0; k < std::max(1, enhancers); ++k) {
      ViTConfig v = k < static_cast<int>(vit_overrides.size()) ? vit_overrides[static_cast<std::size_t>(k)] : vit;
      v.allow_trainable = allow_trainable_foundation;
      detector.enhancers.push_back(v);
    }
  if (train.epochs < 0 || train.batch < 1) throw ContractError("config: epochs >= 0 and batch >= 1 required");
  if (workers < 1) throw ContractError("config: workers must be >= 1");
  scene.seed = seed.value_or(0);
  scene.validate();
}

std::string RunConfig::to_ini() const {
  std::ostringstream os;
  os.precision(17);
  os << "[run]\n";
  if (seed) os << "seed = " << *seed << "\n";
  os << "data_dir = " << data_dir << "\nval_dir = " << val_dir << "\nout_dir = " << out_dir
     << "\ncheckpoint = " << checkpoint << "\nworkers = " << workers << "\n\n[scene]\ncanvas = " << scene.canvas
     << "\nn = " << n_images << "\nmin_objects = " << scene.min_objects << "\nmax_objects = " << scene.max_objects
     << "\nocclusion_rate = " << scene.occlusion_rate
     << "\ncooccurrence = " << (scene.cooccurrence.empty() ? 0.0 : scene.cooccurrence[0].probability)
     << "\ndistractors = " << scene.distractors << "\nbackground_noise = " << scene.background_noise
     << "\n\n[detector]\ninput_size = " << detector.input_size << "\nnum_classes = " << detector.num_classes
     << "\nhidden = " << detector.hidden << "\nqueries = " << detector.queries
     << "\nenc_layers = " << detector.enc_layers << "\ndec_layers = " << detector.dec_layers
     << "\nheads = " << detector.heads << "\npoints = " << detector.points << "\nffn = " << detector.ffn
     << "\nimage_queries = " << detector.image_queries << "\nfuse_patches = " << (detector.fuse_patches ? "on" : "off")
     << "\nself_query = " << (detector.self_query ? "on" : "off") << "\nenhancers = " << enhancers
     << "\n\n[foundation]\ncheckpoints = " << join(foundations)
     << "\nallow_trainable = " << (allow_trainable_foundation ? "on" : "off") << "\n";
  vit_ini(os, vit);
  for (std::size_t k = 0; k < vit_overrides.size(); ++k) {
    os << "\n[enhancer." << k << "]\n";
    vit_ini(os, vit_overrides[k]);
  }
  os << "\n[train]\nepochs = " << train.epochs << "\nbatch = " << train.batch << "\nlr = " << train.lr
     << "\nlr_drop = " << train.lr_drop << "\nbackbone_lr_mult = " << train.backbone_lr_mult
     << "\nweight_decay = " << train.weight_decay
     << "\nclip = " << train.clip << "\neval_every = " << train.eval_every
     << "\ncache_foundation = " << (train.cache_foundation ? "on" : "off") << "\nmax_steps = " << train.max_steps
     << "\n\n[pretrain]\nepochs = " << pretrain.epochs << "\nbatch = " << pretrain.batch << "\nlr = " << pretrain.lr
     << "\nrandom_frozen = " << (pretrain.random_frozen ? "on" : "off") << "\nholdout = " << pretrain.holdout
     << "\n\n[eval]\nscore_threshold = " << score_threshold << "\nerror_threshold = " << error_threshold
     << "\nlevel = " << vis_level << "\nimages = " << vis_images << "\n";
  return os.str();
}

void merge_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(f, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw IoError("config " + path.string() + ": " + e.what());
  }
  for (const auto& [section, body] : pt) {
    if (body.empty()) throw ContractError("config: key '" + section + "' outside any [section]");
    for (const auto& [key, value] : body) cfg.set(section, key, trim(value.data()));
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  RunConfig cfg;
  merge_config_file(cfg, path);
  return cfg;
}

void apply_env_overrides(RunConfig& cfg) {
  if (const char* s = std::getenv("FDTR_SEED"); s != nullptr && *s != '\0') cfg.set("run", "seed", s);
}

}  // namespace fdtr
