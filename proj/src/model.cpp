#include "splatflow/model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "splatflow/camera.hpp"
#include "splatflow/rng.hpp"

namespace splatflow {

using json = nlohmann::json;

void ModelConfig::validate() const {
  if (hidden_dim <= 0 || blocks <= 0 || heads <= 0 || registers < 0)
    throw std::invalid_argument("ModelConfig: non-positive dimension");
  if (hidden_dim % heads != 0)
    throw std::invalid_argument("ModelConfig: hidden_dim not divisible by heads");
  if (cond_drop_prob < 0.0 || cond_drop_prob > 1.0)
    throw std::invalid_argument("ModelConfig: cond_drop_prob outside [0, 1]");
  if (t_embed_dim % 2 != 0)
    throw std::invalid_argument("ModelConfig: t_embed_dim must be even");
}

std::string ModelConfig::describe() const {
  std::ostringstream s;
  s << "hidden_dim=" << hidden_dim << " blocks=" << blocks << " heads=" << heads
    << " registers=" << registers << " pos_embed_channels=" << pos_embed_channels
    << " patch_size=" << patch_size << " cond_grid=" << cond_grid
    << " ffn_mult=" << ffn_mult
    << " t_embed_dim=" << t_embed_dim << " cond_drop_prob=" << cond_drop_prob;
  return s.str();
}

ConditionTokens encode_condition(std::span<const View> views, int patch_size) {
  if (views.empty()) throw std::invalid_argument("encode_condition: no views");
  const int w = views[0].camera.width, h = views[0].camera.height;
  if (w % patch_size != 0 || h % patch_size != 0)
    throw std::invalid_argument("encode_condition: resolution not divisible by patch size");
  if (w != h) throw std::invalid_argument("encode_condition: expected square views");
  const int grid = w / patch_size;

  ConditionTokens out;
  out.views = static_cast<int>(views.size());
  out.grid = grid;
  out.features.resize(static_cast<Eigen::Index>(views.size()) * grid * grid, 9);

  Eigen::Index row = 0;
  for (const View& view : views) {
    if (view.camera.width != w || view.camera.height != h)
      throw std::invalid_argument("encode_condition: mixed view resolutions");
    if (view.target.width != w || view.target.height != h)
      throw std::invalid_argument("encode_condition: image/camera size mismatch");
    const Eigen::MatrixXd rays = plucker_rays(view.camera);
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx, ++row) {
        Eigen::Matrix<double, 1, 9> f = Eigen::Matrix<double, 1, 9>::Zero();
        for (int py = gy * patch_size; py < (gy + 1) * patch_size; ++py)
          for (int px = gx * patch_size; px < (gx + 1) * patch_size; ++px) {
            const double* p = view.target.at(px, py);
            f(0) += p[0];
            f(1) += p[1];
            f(2) += p[2];
            f.segment<6>(3) += rays.row(static_cast<Eigen::Index>(py) * w + px);
          }
        out.features.row(row) = f / static_cast<double>(patch_size * patch_size);
      }
    }
  }
  return out;
}

Eigen::MatrixXd timestep_embedding(double t, int dim) {
  const int half = dim / 2;
  Eigen::MatrixXd emb(1, dim);
  const double x = 1000.0 * t;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    emb(0, k) = std::cos(x * freq);
    emb(0, half + k) = std::sin(x * freq);
  }
  return emb;
}

Eigen::MatrixXd& ParameterStore::at(const std::string& name) {
  auto it = entries.find(name);
  if (it == entries.end())
    throw std::out_of_range("ParameterStore: unknown parameter " + name);
  return it->second.value;
}

const Eigen::MatrixXd& ParameterStore::at(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end())
    throw std::out_of_range("ParameterStore: unknown parameter " + name);
  return it->second.value;
}

std::int64_t ParameterStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [name, e] : entries) n += e.value.size();
  return n;
}

namespace {

Eigen::MatrixXd trunc_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols,
                             double stddev) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.trunc_normal(stddev);
  return m;
}

std::string block_name(int i, const char* suffix) {
  return "block" + std::to_string(i) + "." + suffix;
}

}  // namespace

DenoiserModel::DenoiserModel(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);
  const int h = cfg_.hidden_dim;
  const int f = cfg_.ffn_mult * h;
  const double sd = 0.02;

  auto weight = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    store_.entries[name] = {trunc_normal(rng, r, c, sd), Eigen::MatrixXd::Zero(r, c),
                            Eigen::MatrixXd::Zero(r, c)};
  };
  auto zeros = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    store_.entries[name] = {Eigen::MatrixXd::Zero(r, c), Eigen::MatrixXd::Zero(r, c),
                            Eigen::MatrixXd::Zero(r, c)};
  };
  auto ones = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    store_.entries[name] = {Eigen::MatrixXd::Ones(r, c), Eigen::MatrixXd::Zero(r, c),
                            Eigen::MatrixXd::Zero(r, c)};
  };

  weight("in_proj.w", cfg_.token_in_width(), h);
  zeros("in_proj.b", 1, h);
  weight("cond_proj.w", cfg_.cond_in_channels(), h);
  zeros("cond_proj.b", 1, h);
  weight("pos_embed", static_cast<Eigen::Index>(cfg_.cond_grid) * cfg_.cond_grid,
         cfg_.pos_embed_channels);
  weight("registers", cfg_.registers, h);
  weight("t_mlp.w1", cfg_.t_embed_dim, h);
  zeros("t_mlp.b1", 1, h);
  weight("t_mlp.w2", h, h);
  zeros("t_mlp.b2", 1, h);
  for (int i = 0; i < cfg_.blocks; ++i) {
    weight(block_name(i, "qkv.w"), h, 3 * h);
    zeros(block_name(i, "qkv.b"), 1, 3 * h);
    ones(block_name(i, "q_gain"), 1, h);
    ones(block_name(i, "k_gain"), 1, h);
    weight(block_name(i, "attn_out.w"), h, h);
    zeros(block_name(i, "attn_out.b"), 1, h);
    zeros(block_name(i, "mod.w"), h, 6 * h);  // identity blocks at init
    zeros(block_name(i, "mod.b"), 1, 6 * h);
    weight(block_name(i, "ffn.wg"), h, f);
    zeros(block_name(i, "ffn.bg"), 1, f);
    weight(block_name(i, "ffn.wv"), h, f);
    zeros(block_name(i, "ffn.bv"), 1, f);
    weight(block_name(i, "ffn.w2"), f, h);
    zeros(block_name(i, "ffn.b2"), 1, h);
  }
  zeros("final.mod.w", h, 2 * h);
  zeros("final.mod.b", 1, 2 * h);
  zeros("out_proj.w", h, cfg_.token_out_width());
  zeros("out_proj.b", 1, cfg_.token_out_width());
}

int DenoiserModel::forward(Tape& tape, int gauss_tokens, const ConditionTokens& cond,
                           double t, bool drop_cond) const {
  const int h = cfg_.hidden_dim;
  const int n_gauss = static_cast<int>(tape.value(gauss_tokens).rows());
  if (tape.value(gauss_tokens).cols() != cfg_.token_in_width())
    throw std::invalid_argument("forward: token width mismatch");
  if (cond.features.cols() != 9)
    throw std::invalid_argument("forward: condition feature width mismatch");

  auto P = [&](const std::string& name) { return tape.param(name, store_.at(name)); };
  auto linear = [&](int x, const std::string& w, const std::string& b) {
    return tape.add_rowvec(tape.matmul(x, P(w)), P(b));
  };
  auto silu = [&](int x) { return tape.mul(x, tape.sigmoid(x)); };
  // RMS-normalize each head slice of a T x H matrix
  auto qk_norm = [&](int x) {
    std::vector<int> slices;
    for (int head = 0; head < cfg_.heads; ++head)
      slices.push_back(
          tape.rmsnorm_rows(tape.slice_cols(x, head * cfg_.head_dim(), cfg_.head_dim())));
    return tape.concat_cols(slices);
  };

  // gaussian tokens: linear projection, no positional encoding
  const int gauss_h = linear(gauss_tokens, "in_proj.w", "in_proj.b");

  // condition tokens: [pooled rgb+plucker || learned positional embedding]
  const Eigen::Index n_cond = cond.features.rows();
  int cond_h;
  if (drop_cond) {
    const int zeroed =
        tape.input(Eigen::MatrixXd::Zero(n_cond, cfg_.cond_in_channels()));
    cond_h = linear(zeroed, "cond_proj.w", "cond_proj.b");
  } else {
    if (cond.grid != cfg_.cond_grid)
      throw std::invalid_argument("forward: condition grid " +
                                  std::to_string(cond.grid) +
                                  " does not match the model's positional table (" +
                                  std::to_string(cfg_.cond_grid) + ")");
    const int feats = tape.input(cond.features);
    const int pos = P("pos_embed");
    std::vector<int> tiles(static_cast<std::size_t>(cond.views), pos);
    const int pos_tiled = cond.views == 1 ? pos : tape.concat_rows(tiles);
    const int joined = tape.concat_cols({feats, pos_tiled});
    cond_h = linear(joined, "cond_proj.w", "cond_proj.b");
  }

  int x = tape.concat_rows({gauss_h, cond_h, P("registers")});

  // timestep conditioning
  const int sin_emb = tape.input(timestep_embedding(t, cfg_.t_embed_dim));
  const int temb = linear(silu(linear(sin_emb, "t_mlp.w1", "t_mlp.b1")), "t_mlp.w2",
                          "t_mlp.b2");
  const int temb_act = silu(temb);

  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim()));
  for (int b = 0; b < cfg_.blocks; ++b) {
    const int mod = linear(temb_act, block_name(b, "mod.w"), block_name(b, "mod.b"));
    const int shift_a = tape.slice_cols(mod, 0, h);
    const int scale_a = tape.slice_cols(mod, h, h);
    const int gate_a = tape.slice_cols(mod, 2 * h, h);
    const int shift_f = tape.slice_cols(mod, 3 * h, h);
    const int scale_f = tape.slice_cols(mod, 4 * h, h);
    const int gate_f = tape.slice_cols(mod, 5 * h, h);

    const int hn = tape.row_affine(tape.rmsnorm_rows(x), scale_a, shift_a);
    const int qkv = linear(hn, block_name(b, "qkv.w"), block_name(b, "qkv.b"));
    const int q = tape.mul_rowvec(qk_norm(tape.slice_cols(qkv, 0, h)),
                                  P(block_name(b, "q_gain")));
    const int k = tape.mul_rowvec(qk_norm(tape.slice_cols(qkv, h, h)),
                                  P(block_name(b, "k_gain")));
    const int v = tape.slice_cols(qkv, 2 * h, h);

    std::vector<int> head_outs;
    for (int head = 0; head < cfg_.heads; ++head) {
      const int c0 = head * cfg_.head_dim();
      head_outs.push_back(tape.attention(tape.slice_cols(q, c0, cfg_.head_dim()),
                                         tape.slice_cols(k, c0, cfg_.head_dim()),
                                         tape.slice_cols(v, c0, cfg_.head_dim()),
                                         n_gauss, attn_scale));
    }
    const int attn = linear(tape.concat_cols(head_outs), block_name(b, "attn_out.w"),
                            block_name(b, "attn_out.b"));
    x = tape.add(x, tape.mul_rowvec(attn, gate_a));

    const int fn = tape.row_affine(tape.rmsnorm_rows(x), scale_f, shift_f);
    const int gated = tape.mul(tape.gelu(linear(fn, block_name(b, "ffn.wg"),
                                                block_name(b, "ffn.bg"))),
                               linear(fn, block_name(b, "ffn.wv"), block_name(b, "ffn.bv")));
    const int ffn = linear(gated, block_name(b, "ffn.w2"), block_name(b, "ffn.b2"));
    x = tape.add(x, tape.mul_rowvec(ffn, gate_f));
  }

  // only Gaussian-token positions are read out
  const int xg = tape.slice_rows(x, 0, n_gauss);
  const int fmod = linear(temb_act, "final.mod.w", "final.mod.b");
  const int y = tape.row_affine(tape.rmsnorm_rows(xg), tape.slice_cols(fmod, h, h),
                                tape.slice_cols(fmod, 0, h));
  return linear(y, "out_proj.w", "out_proj.b");
}

Eigen::MatrixXd DenoiserModel::predict(const Eigen::MatrixXd& tokens,
                                       const ConditionTokens& cond, double t,
                                       bool drop_cond) const {
  Tape tape;
  const int in = tape.input(tokens);
  const int out = forward(tape, in, cond, t, drop_cond);
  return tape.value(out);
}

namespace {

constexpr char kCkptMagic[8] = {'S', 'F', 'C', 'K', 'P', 'T', '0', '1'};

json config_to_json(const ModelConfig& c) {
  return json{{"hidden_dim", c.hidden_dim},
              {"blocks", c.blocks},
              {"heads", c.heads},
              {"registers", c.registers},
              {"pos_embed_channels", c.pos_embed_channels},
              {"patch_size", c.patch_size},
              {"cond_grid", c.cond_grid},
              {"ffn_mult", c.ffn_mult},
              {"t_embed_dim", c.t_embed_dim},
              {"cond_drop_prob", c.cond_drop_prob}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.hidden_dim = j.at("hidden_dim");
  c.blocks = j.at("blocks");
  c.heads = j.at("heads");
  c.registers = j.at("registers");
  c.pos_embed_channels = j.at("pos_embed_channels");
  c.patch_size = j.at("patch_size");
  c.cond_grid = j.at("cond_grid");
  c.ffn_mult = j.at("ffn_mult");
  c.t_embed_dim = j.at("t_embed_dim");
  c.cond_drop_prob = j.at("cond_drop_prob");
  return c;
}

void write_mat(std::ofstream& out, const Eigen::MatrixXd& m) {
  const std::uint32_t dims[2] = {static_cast<std::uint32_t>(m.rows()),
                                 static_cast<std::uint32_t>(m.cols())};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  // column-major, Eigen's native layout
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
}

Eigen::MatrixXd read_mat(std::ifstream& in) {
  std::uint32_t dims[2];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  Eigen::MatrixXd m(dims[0], dims[1]);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
  return m;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kCkptMagic, 8);
  const std::uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), 4);

  json meta;
  meta["model"] = config_to_json(ckpt.config);
  meta["step"] = ckpt.step;
  meta["rng_state"] = ckpt.rng_state;
  meta["rng_has_spare"] = ckpt.rng_has_spare;
  meta["rng_spare"] = ckpt.rng_spare;
  meta["run_config_hash"] = ckpt.run_config_hash;
  const std::string meta_str = meta.dump();
  const std::uint64_t meta_len = meta_str.size();
  out.write(reinterpret_cast<const char*>(&meta_len), 8);
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

  // norm stats as raw doubles to keep the round-trip bit-exact
  out.write(reinterpret_cast<const char*>(ckpt.stats.channel_mean.data()),
            kParamChannels * sizeof(double));
  out.write(reinterpret_cast<const char*>(ckpt.stats.channel_std.data()),
            kParamChannels * sizeof(double));

  const std::uint32_t count = static_cast<std::uint32_t>(ckpt.store.entries.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& [name, e] : ckpt.store.entries) {
    const std::uint32_t len = static_cast<std::uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(name.data(), len);
    write_mat(out, e.value);
    write_mat(out, e.m);
    write_mat(out, e.v);
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1)
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(version));
  std::uint64_t meta_len = 0;
  in.read(reinterpret_cast<char*>(&meta_len), 8);
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  const json meta = json::parse(meta_str);

  Checkpoint ckpt;
  ckpt.config = config_from_json(meta.at("model"));
  ckpt.step = meta.at("step");
  ckpt.rng_state = meta.at("rng_state");
  ckpt.rng_has_spare = meta.at("rng_has_spare");
  ckpt.rng_spare = meta.at("rng_spare");
  ckpt.run_config_hash = meta.value("run_config_hash", "");

  in.read(reinterpret_cast<char*>(ckpt.stats.channel_mean.data()),
          kParamChannels * sizeof(double));
  in.read(reinterpret_cast<char*>(ckpt.stats.channel_std.data()),
          kParamChannels * sizeof(double));

  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    std::string name(len, '\0');
    in.read(name.data(), len);
    ParameterStore::Entry e;
    e.value = read_mat(in);
    e.m = read_mat(in);
    e.v = read_mat(in);
    ckpt.store.entries[name] = std::move(e);
  }
  if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
  return ckpt;
}

void ensure_config_match(const ModelConfig& expected, const ModelConfig& loaded) {
  if (expected == loaded) return;
  throw std::runtime_error("checkpoint config mismatch:\n  expected: " +
                           expected.describe() + "\n  loaded:   " + loaded.describe());
}

}  // namespace splatflow
