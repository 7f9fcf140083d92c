#include "splatflow/runconfig.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace splatflow {

using json = nlohmann::json;

namespace {

json to_json(const RunConfig& c) {
  json j;
  j["dataset"] = {{"dir", c.dataset_dir},        {"n_objects", c.n_objects},
                  {"gaussian_count", c.gaussian_count}, {"rig_cameras", c.rig_cameras},
                  {"rig_radius", c.rig_radius},  {"image_size", c.image_size},
                  {"seed", c.seed}};
  j["curriculum"] = {{"coarse_depth", c.coarse_depth}, {"fine_depth", c.fine_depth}};
  j["model"] = {{"hidden_dim", c.model.hidden_dim},
                {"blocks", c.model.blocks},
                {"heads", c.model.heads},
                {"registers", c.model.registers},
                {"pos_embed_channels", c.model.pos_embed_channels},
                {"patch_size", c.model.patch_size},
                {"cond_grid", c.model.cond_grid},
                {"ffn_mult", c.model.ffn_mult},
                {"t_embed_dim", c.model.t_embed_dim},
                {"cond_drop_prob", c.model.cond_drop_prob}};
  j["train"] = {{"stage1_steps", c.stage1_steps},
                {"stage2_steps", c.stage2_steps},
                {"batch_size", c.batch_size},
                {"input_views", c.input_views},
                {"held_views", c.held_views},
                {"partial_train_frac", c.partial_train_frac},
                {"t_cap", c.t_cap},
                {"val_interval", c.val_interval},
                {"val_objects", c.val_objects}};
  j["optim"] = {{"lr_peak", c.optim.lr_peak},
                {"lr_min", c.optim.lr_min},
                {"warmup_steps", c.optim.warmup_steps},
                {"total_steps", c.optim.total_steps},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"adam_eps", c.optim.adam_eps},
                {"weight_decay", c.optim.weight_decay},
                {"grad_clip", c.optim.grad_clip}};
  j["guidance"] = {{"steps", c.guidance.steps},
                   {"dt", c.guidance.dt},
                   {"cfg_scale", c.guidance.cfg_scale},
                   {"lambda_pg", c.guidance.lambda_pg},
                   {"t_cap", c.guidance.t_cap},
                   {"pg_unit_rms", c.guidance.pg_unit_rms}};
  j["render"] = {{"background", {c.background[0], c.background[1], c.background[2]}},
                 {"threads", c.threads}};
  return j;
}

RunConfig from_json(const json& j) {
  RunConfig c;
  const json& d = j.at("dataset");
  c.dataset_dir = d.at("dir");
  c.n_objects = d.at("n_objects");
  c.gaussian_count = d.at("gaussian_count");
  c.rig_cameras = d.at("rig_cameras");
  c.rig_radius = d.at("rig_radius");
  c.image_size = d.at("image_size");
  c.seed = d.at("seed");
  c.coarse_depth = j.at("curriculum").at("coarse_depth");
  c.fine_depth = j.at("curriculum").at("fine_depth");
  const json& m = j.at("model");
  c.model.hidden_dim = m.at("hidden_dim");
  c.model.blocks = m.at("blocks");
  c.model.heads = m.at("heads");
  c.model.registers = m.at("registers");
  c.model.pos_embed_channels = m.at("pos_embed_channels");
  c.model.patch_size = m.at("patch_size");
  c.model.cond_grid = m.at("cond_grid");
  c.model.ffn_mult = m.at("ffn_mult");
  c.model.t_embed_dim = m.at("t_embed_dim");
  c.model.cond_drop_prob = m.at("cond_drop_prob");
  const json& t = j.at("train");
  c.stage1_steps = t.at("stage1_steps");
  c.stage2_steps = t.at("stage2_steps");
  c.batch_size = t.at("batch_size");
  c.input_views = t.at("input_views");
  c.held_views = t.at("held_views");
  c.partial_train_frac = t.at("partial_train_frac");
  c.t_cap = t.at("t_cap");
  c.val_interval = t.at("val_interval");
  c.val_objects = t.at("val_objects");
  const json& o = j.at("optim");
  c.optim.lr_peak = o.at("lr_peak");
  c.optim.lr_min = o.at("lr_min");
  c.optim.warmup_steps = o.at("warmup_steps");
  c.optim.total_steps = o.at("total_steps");
  c.optim.beta1 = o.at("beta1");
  c.optim.beta2 = o.at("beta2");
  c.optim.adam_eps = o.at("adam_eps");
  c.optim.weight_decay = o.at("weight_decay");
  c.optim.grad_clip = o.at("grad_clip");
  const json& g = j.at("guidance");
  c.guidance.steps = g.at("steps");
  c.guidance.dt = g.at("dt");
  c.guidance.cfg_scale = g.at("cfg_scale");
  c.guidance.lambda_pg = g.at("lambda_pg");
  c.guidance.t_cap = g.at("t_cap");
  c.guidance.pg_unit_rms = g.at("pg_unit_rms");
  const json& r = j.at("render");
  c.background[0] = r.at("background").at(0);
  c.background[1] = r.at("background").at(1);
  c.background[2] = r.at("background").at(2);
  c.threads = r.at("threads");
  return c;
}

}  // namespace

DatasetConfig RunConfig::dataset_config() const {
  DatasetConfig d;
  d.out_dir = dataset_dir;
  d.n_objects = n_objects;
  d.gaussian_count = gaussian_count;
  d.rig_cameras = rig_cameras;
  d.rig_radius = rig_radius;
  d.image_size = image_size;
  d.coarse_depth = coarse_depth;
  d.seed = seed;
  d.config_hash = config_hash(*this);
  d.background = background_color();
  d.threads = threads;
  return d;
}

RunConfig default_run_config() { return RunConfig{}; }

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_run_config: cannot open " + path);
  json j;
  in >> j;
  return from_json(j);
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_run_config: cannot open " + path);
  out << to_json(cfg).dump(2) << '\n';
}

std::string run_config_json(const RunConfig& cfg) { return to_json(cfg).dump(); }

RunConfig run_config_from_json_text(const std::string& text) {
  return from_json(json::parse(text));
}

std::string config_hash(const RunConfig& cfg) {
  const std::string dump = run_config_json(cfg);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  std::ostringstream s;
  s << std::hex << h;
  return s.str();
}

}  // namespace splatflow
