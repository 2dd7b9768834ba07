#include "lmm/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace lmm::model {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;
using RowVecMap = Eigen::Map<Eigen::RowVectorXd>;
using CRowVecMap = Eigen::Map<const Eigen::RowVectorXd>;

constexpr double kNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

Error config_error(const std::string& what) { return Error(ErrorCode::ConfigError, what); }

struct LayerOffsets {
  std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
};

struct Offsets {
  std::size_t wte, wpe, lnf_g, lnf_b;
  std::vector<LayerOffsets> layers;
};

Offsets offsets_of(const std::vector<TensorInfo>& layout, int n_layers) {
  Offsets o{};
  std::size_t i = 0;
  o.wte = layout[i++].offset;
  o.wpe = layout[i++].offset;
  for (int l = 0; l < n_layers; ++l) {
    LayerOffsets lo{};
    lo.ln1_g = layout[i++].offset;
    lo.ln1_b = layout[i++].offset;
    lo.w_qkv = layout[i++].offset;
    lo.b_qkv = layout[i++].offset;
    lo.w_o = layout[i++].offset;
    lo.b_o = layout[i++].offset;
    lo.ln2_g = layout[i++].offset;
    lo.ln2_b = layout[i++].offset;
    lo.w_fc = layout[i++].offset;
    lo.b_fc = layout[i++].offset;
    lo.w_proj = layout[i++].offset;
    lo.b_proj = layout[i++].offset;
    o.layers.push_back(lo);
  }
  o.lnf_g = layout[i++].offset;
  o.lnf_b = layout[i++].offset;
  return o;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

void layernorm_forward(const double* x, std::size_t rows, std::size_t d, const double* g, const double* b,
                       double* out, double* mean, double* rstd) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xr = x + t * d;
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i) m += xr[i];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t i = 0; i < d; ++i) v += (xr[i] - m) * (xr[i] - m);
    v /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(v + kNormEps);
    double* o = out + t * d;
    for (std::size_t i = 0; i < d; ++i) o[i] = (xr[i] - m) * r * g[i] + b[i];
    mean[t] = m;
    rstd[t] = r;
  }
}

// Accumulates into dx, dg, db.
void layernorm_backward(const double* dy, const double* x, const double* mean, const double* rstd,
                        std::size_t rows, std::size_t d, const double* g, double* dx, double* dg, double* db) {
  AlignedDoubles xhat(d), dxhat(d);
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xr = x + t * d;
    const double* dyr = dy + t * d;
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      xhat[i] = (xr[i] - mean[t]) * rstd[t];
      dxhat[i] = dyr[i] * g[i];
      dg[i] += dyr[i] * xhat[i];
      db[i] += dyr[i];
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * xhat[i];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    double* dxr = dx + t * d;
    for (std::size_t i = 0; i < d; ++i) dxr[i] += rstd[t] * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
  }
}

struct LayerActs {
  AlignedDoubles x_in, ln1, ln1_mean, ln1_rstd, qkv, atty, x_mid, ln2, ln2_mean, ln2_rstd, fc_pre, fc_act;
  std::vector<AlignedDoubles> att;  // per head, T x T
};

struct Activations {
  std::size_t T = 0;
  std::vector<LayerActs> layers;
  AlignedDoubles x_out, lnf, lnf_mean, lnf_rstd, logits;
};

void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw Error(ErrorCode::SequenceTooLong, "empty input");
  if (tokens.size() > static_cast<std::size_t>(c.context_len)) {
    throw Error(ErrorCode::SequenceTooLong,
                std::to_string(tokens.size()) + " tokens exceeds context " + std::to_string(c.context_len));
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= c.vocab_size) throw Error(ErrorCode::UnknownTokenId, "token id " + std::to_string(t));
  }
}

void run_forward(const ModelParameters& p, const Offsets& off, std::span<const TokenId> tokens, Activations& a) {
  const auto& c = p.config;
  const std::size_t T = tokens.size(), d = static_cast<std::size_t>(c.d_model);
  const std::size_t H = static_cast<std::size_t>(c.n_heads), dh = d / H, V = static_cast<std::size_t>(c.vocab_size);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* w = p.data.data();
  a.T = T;
  a.layers.resize(static_cast<std::size_t>(c.n_layers));

  AlignedDoubles x(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    const double* te = w + off.wte + static_cast<std::size_t>(tokens[t]) * d;
    const double* pe = w + off.wpe + t * d;
    for (std::size_t i = 0; i < d; ++i) x[t * d + i] = te[i] + pe[i];
  }

  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto& lo = off.layers[l];
    auto& L = a.layers[l];
    L.x_in = x;
    L.ln1.resize(T * d);
    L.ln1_mean.resize(T);
    L.ln1_rstd.resize(T);
    layernorm_forward(x.data(), T, d, w + lo.ln1_g, w + lo.ln1_b, L.ln1.data(), L.ln1_mean.data(), L.ln1_rstd.data());

    L.qkv.resize(T * 3 * d);
    MatMap qkv(L.qkv.data(), T, 3 * d);
    qkv.noalias() = CMatMap(L.ln1.data(), T, d) * CMatMap(w + lo.w_qkv, d, 3 * d);
    qkv.rowwise() += CRowVecMap(w + lo.b_qkv, 3 * d);

    L.atty.assign(T * d, 0.0);
    MatMap atty(L.atty.data(), T, d);
    L.att.resize(H);
    RowMat scores(T, T);
    for (std::size_t h = 0; h < H; ++h) {
      auto q = qkv.block(0, h * dh, T, dh);
      auto k = qkv.block(0, d + h * dh, T, dh);
      auto v = qkv.block(0, 2 * d + h * dh, T, dh);
      scores.noalias() = q * k.transpose();
      auto& att = L.att[h];
      att.assign(T * T, 0.0);
      for (std::size_t t = 0; t < T; ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= t; ++j) mx = std::max(mx, scores(t, j) * scale);
        double sum = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          const double e = std::exp(scores(t, j) * scale - mx);
          att[t * T + j] = e;
          sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j <= t; ++j) att[t * T + j] *= inv;
      }
      atty.block(0, h * dh, T, dh).noalias() = CMatMap(att.data(), T, T) * v;
    }

    L.x_mid.resize(T * d);
    MatMap xm(L.x_mid.data(), T, d);
    xm.noalias() = atty * CMatMap(w + lo.w_o, d, d);
    xm.rowwise() += CRowVecMap(w + lo.b_o, d);
    xm += CMatMap(x.data(), T, d);

    L.ln2.resize(T * d);
    L.ln2_mean.resize(T);
    L.ln2_rstd.resize(T);
    layernorm_forward(L.x_mid.data(), T, d, w + lo.ln2_g, w + lo.ln2_b, L.ln2.data(), L.ln2_mean.data(),
                      L.ln2_rstd.data());

    L.fc_pre.resize(T * 4 * d);
    MatMap fc(L.fc_pre.data(), T, 4 * d);
    fc.noalias() = CMatMap(L.ln2.data(), T, d) * CMatMap(w + lo.w_fc, d, 4 * d);
    fc.rowwise() += CRowVecMap(w + lo.b_fc, 4 * d);
    L.fc_act.resize(T * 4 * d);
    for (std::size_t i = 0; i < L.fc_pre.size(); ++i) L.fc_act[i] = gelu(L.fc_pre[i]);

    MatMap xo(x.data(), T, d);
    xo.noalias() = CMatMap(L.fc_act.data(), T, 4 * d) * CMatMap(w + lo.w_proj, 4 * d, d);
    xo.rowwise() += CRowVecMap(w + lo.b_proj, d);
    xo += xm;
  }

  a.x_out = std::move(x);
  a.lnf.resize(T * d);
  a.lnf_mean.resize(T);
  a.lnf_rstd.resize(T);
  layernorm_forward(a.x_out.data(), T, d, w + off.lnf_g, w + off.lnf_b, a.lnf.data(), a.lnf_mean.data(),
                    a.lnf_rstd.data());
  a.logits.resize(T * V);
  MatMap(a.logits.data(), T, V).noalias() = CMatMap(a.lnf.data(), T, d) * CMatMap(w + off.wte, V, d).transpose();
}

// Converts logits in place into dLoss/dlogits (scaled by inv_count) and
// returns the compensated sum of per-position losses.
double softmax_xent(AlignedDoubles& logits, std::size_t T, std::size_t V, std::span<const TokenId> targets,
                    double inv_count, bool want_grad) {
  KahanSum loss;
  for (std::size_t t = 0; t < T; ++t) {
    double* row = logits.data() + t * V;
    const TokenId y = targets[t];
    if (y == kIgnoreTarget) {
      if (want_grad) std::fill(row, row + V, 0.0);
      continue;
    }
    double mx = row[0];
    for (std::size_t i = 1; i < V; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < V; ++i) sum += std::exp(row[i] - mx);
    const double lse = mx + std::log(sum);
    loss.add(lse - row[static_cast<std::size_t>(y)]);
    if (want_grad) {
      for (std::size_t i = 0; i < V; ++i) row[i] = std::exp(row[i] - lse) * inv_count;
      row[static_cast<std::size_t>(y)] -= inv_count;
    }
  }
  return loss.value();
}

void run_backward(const ModelParameters& p, const Offsets& off, std::span<const TokenId> tokens, Activations& a,
                  AlignedDoubles& grad) {
  const auto& c = p.config;
  const std::size_t T = a.T, d = static_cast<std::size_t>(c.d_model);
  const std::size_t H = static_cast<std::size_t>(c.n_heads), dh = d / H, V = static_cast<std::size_t>(c.vocab_size);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* w = p.data.data();
  double* gw = grad.data();

  CMatMap dlogits(a.logits.data(), T, V);
  MatMap(gw + off.wte, V, d).noalias() += dlogits.transpose() * CMatMap(a.lnf.data(), T, d);
  AlignedDoubles dlnf(T * d);
  MatMap(dlnf.data(), T, d).noalias() = dlogits * CMatMap(w + off.wte, V, d);

  AlignedDoubles dx(T * d, 0.0);
  layernorm_backward(dlnf.data(), a.x_out.data(), a.lnf_mean.data(), a.lnf_rstd.data(), T, d, w + off.lnf_g,
                     dx.data(), gw + off.lnf_g, gw + off.lnf_b);

  AlignedDoubles dfc(T * 4 * d), dln(T * d), dx_mid(T * d), datty(T * d), dqkv(T * 3 * d);
  RowMat datt(T, T);
  for (std::size_t l = a.layers.size(); l-- > 0;) {
    const auto& lo = off.layers[l];
    const auto& L = a.layers[l];
    CMatMap dxo(dx.data(), T, d);

    // MLP
    MatMap(gw + lo.w_proj, 4 * d, d).noalias() += CMatMap(L.fc_act.data(), T, 4 * d).transpose() * dxo;
    RowVecMap(gw + lo.b_proj, d) += dxo.colwise().sum();
    MatMap dfcm(dfc.data(), T, 4 * d);
    dfcm.noalias() = dxo * CMatMap(w + lo.w_proj, 4 * d, d).transpose();
    for (std::size_t i = 0; i < dfc.size(); ++i) dfc[i] *= gelu_grad(L.fc_pre[i]);
    MatMap(gw + lo.w_fc, d, 4 * d).noalias() += CMatMap(L.ln2.data(), T, d).transpose() * dfcm;
    RowVecMap(gw + lo.b_fc, 4 * d) += dfcm.colwise().sum();
    MatMap(dln.data(), T, d).noalias() = dfcm * CMatMap(w + lo.w_fc, d, 4 * d).transpose();
    dx_mid = dx;
    layernorm_backward(dln.data(), L.x_mid.data(), L.ln2_mean.data(), L.ln2_rstd.data(), T, d, w + lo.ln2_g,
                       dx_mid.data(), gw + lo.ln2_g, gw + lo.ln2_b);

    // Attention
    CMatMap dxm(dx_mid.data(), T, d);
    MatMap(gw + lo.w_o, d, d).noalias() += CMatMap(L.atty.data(), T, d).transpose() * dxm;
    RowVecMap(gw + lo.b_o, d) += dxm.colwise().sum();
    MatMap dattym(datty.data(), T, d);
    dattym.noalias() = dxm * CMatMap(w + lo.w_o, d, d).transpose();

    CMatMap qkv(L.qkv.data(), T, 3 * d);
    MatMap dqkvm(dqkv.data(), T, 3 * d);
    for (std::size_t h = 0; h < H; ++h) {
      CMatMap att(L.att[h].data(), T, T);
      auto dy = dattym.block(0, h * dh, T, dh);
      dqkvm.block(0, 2 * d + h * dh, T, dh).noalias() = att.transpose() * dy;
      datt.noalias() = dy * qkv.block(0, 2 * d + h * dh, T, dh).transpose();
      for (std::size_t t = 0; t < T; ++t) {
        double dot = 0.0;
        for (std::size_t j = 0; j <= t; ++j) dot += att(t, j) * datt(t, j);
        for (std::size_t j = 0; j <= t; ++j) datt(t, j) = att(t, j) * (datt(t, j) - dot) * scale;
        for (std::size_t j = t + 1; j < T; ++j) datt(t, j) = 0.0;
      }
      dqkvm.block(0, h * dh, T, dh).noalias() = datt * qkv.block(0, d + h * dh, T, dh);
      dqkvm.block(0, d + h * dh, T, dh).noalias() = datt.transpose() * qkv.block(0, h * dh, T, dh);
    }
    MatMap(gw + lo.w_qkv, d, 3 * d).noalias() += CMatMap(L.ln1.data(), T, d).transpose() * dqkvm;
    RowVecMap(gw + lo.b_qkv, 3 * d) += dqkvm.colwise().sum();
    MatMap(dln.data(), T, d).noalias() = dqkvm * CMatMap(w + lo.w_qkv, d, 3 * d).transpose();
    dx = dx_mid;
    layernorm_backward(dln.data(), L.x_in.data(), L.ln1_mean.data(), L.ln1_rstd.data(), T, d, w + lo.ln1_g,
                       dx.data(), gw + lo.ln1_g, gw + lo.ln1_b);
  }

  for (std::size_t t = 0; t < T; ++t) {
    double* gte = gw + off.wte + static_cast<std::size_t>(tokens[t]) * d;
    double* gpe = gw + off.wpe + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      gte[i] += dx[t * d + i];
      gpe[i] += dx[t * d + i];
    }
  }
}

void check_example(const ModelConfig& c, const Example& e) {
  check_tokens(c, e.inputs);
  if (e.targets.size() != e.inputs.size()) throw Error(ErrorCode::ConfigError, "targets and inputs differ in length");
  for (TokenId t : e.targets) {
    if (t != kIgnoreTarget && (t < 0 || t >= c.vocab_size)) {
      throw Error(ErrorCode::UnknownTokenId, "target id " + std::to_string(t));
    }
  }
}

std::size_t count_positions(std::span<const Example> batch) {
  std::size_t n = 0;
  for (const auto& e : batch) {
    n += static_cast<std::size_t>(std::count_if(e.targets.begin(), e.targets.end(),
                                                [](TokenId t) { return t != kIgnoreTarget; }));
  }
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (vocab_size < 1) throw config_error("vocab_size must be >= 1");
  if (context_len < 8) throw config_error("context_len must be >= 8");
  if (d_model < 1 || n_heads < 1) throw config_error("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) {
    throw config_error("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (n_layers < 0) throw config_error("n_layers must be >= 0");
  if (!(learning_rate > 0) || batch_size < 1 || n_steps < 0 || eval_every < 1) {
    throw config_error("learning_rate, batch_size, eval_every must be positive");
  }
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw config_error("betas must lie in [0,1)");
  if (weight_decay < 0 || warmup_fraction < 0 || warmup_fraction > 1 || grad_clip < 0 || init_std < 0) {
    throw config_error("negative optimizer setting");
  }
}

std::string ModelConfig::to_json() const {
  nlohmann::json j = {{"vocab_size", vocab_size},       {"context_len", context_len},   {"d_model", d_model},
                      {"n_heads", n_heads},             {"n_layers", n_layers},         {"learning_rate", learning_rate},
                      {"beta1", beta1},                 {"beta2", beta2},               {"adam_eps", adam_eps},
                      {"weight_decay", weight_decay},   {"warmup_fraction", warmup_fraction},
                      {"grad_clip", grad_clip},         {"batch_size", batch_size},     {"n_steps", n_steps},
                      {"eval_every", eval_every},       {"seed", seed},                 {"init_std", init_std}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.context_len = j.value("context_len", c.context_len);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.n_steps = j.value("n_steps", c.n_steps);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.seed = j.value("seed", c.seed);
    c.init_std = j.value("init_std", c.init_std);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("model config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

std::string_view to_string(TensorRole role) {
  switch (role) {
    case TensorRole::TokenEmbedding: return "token_embedding";
    case TensorRole::PositionEmbedding: return "position_embedding";
    case TensorRole::NormScale: return "norm_scale";
    case TensorRole::NormShift: return "norm_shift";
    case TensorRole::QkvWeight: return "qkv_weight";
    case TensorRole::QkvBias: return "qkv_bias";
    case TensorRole::OutWeight: return "out_weight";
    case TensorRole::OutBias: return "out_bias";
    case TensorRole::FcWeight: return "fc_weight";
    case TensorRole::FcBias: return "fc_bias";
    case TensorRole::ProjWeight: return "proj_weight";
    case TensorRole::ProjBias: return "proj_bias";
  }
  return "?";
}

std::vector<TensorInfo> make_layout(const ModelConfig& c) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.d_model);
  std::vector<TensorInfo> layout;
  std::size_t offset = 0;
  auto add = [&](std::string name, TensorRole role, std::size_t rows, std::size_t cols) {
    layout.push_back({std::move(name), role, offset, rows, cols});
    offset += rows * cols;
  };
  add("wte", TensorRole::TokenEmbedding, static_cast<std::size_t>(c.vocab_size), d);
  add("wpe", TensorRole::PositionEmbedding, static_cast<std::size_t>(c.context_len), d);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    add(p + "ln1_g", TensorRole::NormScale, 1, d);
    add(p + "ln1_b", TensorRole::NormShift, 1, d);
    add(p + "w_qkv", TensorRole::QkvWeight, d, 3 * d);
    add(p + "b_qkv", TensorRole::QkvBias, 1, 3 * d);
    add(p + "w_o", TensorRole::OutWeight, d, d);
    add(p + "b_o", TensorRole::OutBias, 1, d);
    add(p + "ln2_g", TensorRole::NormScale, 1, d);
    add(p + "ln2_b", TensorRole::NormShift, 1, d);
    add(p + "w_fc", TensorRole::FcWeight, d, 4 * d);
    add(p + "b_fc", TensorRole::FcBias, 1, 4 * d);
    add(p + "w_proj", TensorRole::ProjWeight, 4 * d, d);
    add(p + "b_proj", TensorRole::ProjBias, 1, d);
  }
  add("lnf_g", TensorRole::NormScale, 1, d);
  add("lnf_b", TensorRole::NormShift, 1, d);
  return layout;
}

const TensorInfo& ModelParameters::tensor(const std::string& name) const {
  for (const auto& t : layout) {
    if (t.name == name) return t;
  }
  throw Error(ErrorCode::ConfigError, "no tensor " + name);
}

bool ModelParameters::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
}

ModelParameters init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParameters p;
  p.config = config;
  p.layout = make_layout(config);
  p.data.assign(p.layout.back().offset + p.layout.back().size(), 0.0);
  Rng rng = Rng::stream(seed, 0x1a17);
  for (const auto& t : p.layout) {
    auto v = p.view(t);
    switch (t.role) {
      case TensorRole::NormScale:
        std::fill(v.begin(), v.end(), 1.0);
        break;
      case TensorRole::TokenEmbedding:
      case TensorRole::PositionEmbedding:
      case TensorRole::QkvWeight:
      case TensorRole::OutWeight:
      case TensorRole::FcWeight:
      case TensorRole::ProjWeight:
        for (auto& x : v) x = config.init_std * rng.normal();
        break;
      default:
        break;
    }
  }
  return p;
}

std::vector<double> forward(const ModelParameters& params, std::span<const TokenId> tokens, ForwardTrace* trace) {
  check_tokens(params.config, tokens);
  const auto off = offsets_of(params.layout, params.config.n_layers);
  Activations a;
  run_forward(params, off, tokens, a);
  if (trace) {
    trace->attention.clear();
    for (auto& L : a.layers) {
      auto& heads = trace->attention.emplace_back();
      for (const auto& h : L.att) heads.emplace_back(h.begin(), h.end());
    }
  }
  return {a.logits.begin(), a.logits.end()};
}

Example make_example(std::span<const TokenId> tokens, TokenId pad) {
  Example e;
  if (tokens.size() < 2) return e;
  e.inputs.assign(tokens.begin(), tokens.end() - 1);
  e.targets.assign(tokens.begin() + 1, tokens.end());
  for (auto& t : e.targets) {
    if (t == pad) t = kIgnoreTarget;
  }
  return e;
}

LossAndGrads loss_and_grads(const ModelParameters& params, std::span<const Example> batch) {
  const auto& c = params.config;
  for (const auto& e : batch) check_example(c, e);
  const std::size_t count = count_positions(batch);
  if (count == 0) throw Error(ErrorCode::AllPositionsMasked, "no unmasked target in batch");
  const double inv = 1.0 / static_cast<double>(count);
  const auto off = offsets_of(params.layout, c.n_layers);

  std::vector<AlignedDoubles> grads(batch.size());
  AlignedDoubles losses(batch.size(), 0.0);
  parallel_for(
      batch.size(),
      [&](std::size_t i) {
        Activations a;
        run_forward(params, off, batch[i].inputs, a);
        losses[i] = softmax_xent(a.logits, a.T, static_cast<std::size_t>(c.vocab_size), batch[i].targets, inv, true);
        grads[i].assign(params.size(), 0.0);
        run_backward(params, off, batch[i].inputs, a, grads[i]);
      },
      c.threads);

  LossAndGrads out;
  out.positions = count;
  out.loss = compensated_sum(losses) * inv;
  out.grads = std::move(grads[0]);
  for (std::size_t i = 1; i < grads.size(); ++i) {
    for (std::size_t k = 0; k < out.grads.size(); ++k) out.grads[k] += grads[i][k];
  }
  return out;
}

double mean_loss(const ModelParameters& params, std::span<const Example> batch, unsigned threads) {
  const auto& c = params.config;
  for (const auto& e : batch) check_example(c, e);
  const std::size_t count = count_positions(batch);
  if (count == 0) throw Error(ErrorCode::AllPositionsMasked, "no unmasked target in batch");
  const auto off = offsets_of(params.layout, c.n_layers);
  AlignedDoubles losses(batch.size(), 0.0);
  parallel_for(
      batch.size(),
      [&](std::size_t i) {
        Activations a;
        run_forward(params, off, batch[i].inputs, a);
        losses[i] = softmax_xent(a.logits, a.T, static_cast<std::size_t>(c.vocab_size), batch[i].targets, 1.0, false);
      },
      threads);
  return compensated_sum(losses) / static_cast<double>(count);
}

// ---------------------------------------------------------------------------

Split assign_split(const std::string& patient_id, std::uint64_t seed) {
  const auto bucket = stable_hash(patient_id, seed) % 1000;
  if (bucket < 950) return Split::Train;
  if (bucket < 975) return Split::Validation;
  return Split::Test;
}

TrainResult train(const std::vector<TrainSequence>& corpus, const ModelConfig& config, const ProgressFn& progress) {
  config.validate();
  if (corpus.empty()) throw Error(ErrorCode::EmptyCorpus, "no training sequences");
  TrainResult result;
  std::vector<Example> train_set, val_set;
  for (const auto& s : corpus) {
    if (s.tokens.size() < 2) continue;
    if (s.tokens.size() - 1 > static_cast<std::size_t>(config.context_len)) {
      throw Error(ErrorCode::SequenceTooLong, "sequence for " + s.patient_id + " exceeds context; truncate first");
    }
    Example e = make_example(s.tokens);
    if (count_positions(std::span<const Example>(&e, 1)) == 0) continue;
    switch (assign_split(s.patient_id, config.seed)) {
      case Split::Train:
        train_set.push_back(std::move(e));
        ++result.n_train;
        break;
      case Split::Validation:
        val_set.push_back(std::move(e));
        ++result.n_val;
        break;
      case Split::Test:
        ++result.n_test;
        break;
    }
  }
  if (train_set.empty()) {
    // Tiny corpora can hash entirely out of the training split.
    train_set = val_set;
    result.n_train = train_set.size();
  }
  if (train_set.empty()) throw Error(ErrorCode::EmptyCorpus, "no sequence with a trainable target");
  if (val_set.empty()) {
    val_set.assign(train_set.begin(), train_set.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(64, train_set.size())));
  }

  ModelParameters params = init_params(config, config.seed);
  std::vector<bool> decay(params.size(), false);
  for (const auto& t : params.layout) {
    const bool is_matrix = t.rows > 1;
    if (is_matrix) std::fill(decay.begin() + static_cast<std::ptrdiff_t>(t.offset),
                             decay.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size()), true);
  }
  AlignedDoubles m(params.size(), 0.0), v(params.size(), 0.0);
  const int warmup = std::max(1, static_cast<int>(std::ceil(config.warmup_fraction * config.n_steps)));

  std::vector<std::size_t> order(train_set.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), 0);
      Rng rng = Rng::stream(config.seed, 0x5eed0000 + epoch++);
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  result.params = params;
  std::vector<Example> batch;
  for (int step = 0; step < config.n_steps; ++step) {
    batch.clear();
    for (int b = 0; b < config.batch_size; ++b) batch.push_back(train_set[next_index()]);
    auto lg = loss_and_grads(params, batch);
    if (!std::isfinite(lg.loss)) {
      throw Error(ErrorCode::NonFiniteLoss, "loss became non-finite at step " + std::to_string(step + 1));
    }
    if (config.grad_clip > 0) {
      KahanSum sq;
      for (double g : lg.grads) sq.add(g * g);
      const double norm = std::sqrt(sq.value());
      if (norm > config.grad_clip) {
        const double s = config.grad_clip / norm;
        for (auto& g : lg.grads) g *= s;
      }
    }
    const double lr = config.learning_rate * std::min(1.0, (step + 1.0) / warmup);
    const double t = step + 1.0;
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const double g = lg.grads[k];
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g;
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g;
      const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config.adam_eps);
      if (decay[k]) params.data[k] -= lr * config.weight_decay * params.data[k];
      params.data[k] -= lr * update;
    }
    if (!params.all_finite()) {
      throw Error(ErrorCode::NonFiniteLoss, "parameters became non-finite at step " + std::to_string(step + 1));
    }

    LossRecord rec{step + 1, lg.loss};
    if ((step + 1) % config.eval_every == 0 || step + 1 == config.n_steps) {
      rec.val_loss = mean_loss(params, val_set, config.threads);
      if (rec.val_loss < result.best_val_loss) {
        result.best_val_loss = rec.val_loss;
        result.best_step = step + 1;
        result.params = params;
      }
    }
    result.history.push_back(rec);
    if (progress) progress(rec);
  }
  return result;
}

std::string history_csv(const std::vector<LossRecord>& history) {
  std::string out = "step,train_loss,val_loss\n";
  for (const auto& r : history) {
    out += std::to_string(r.step) + "," + format_double(r.train_loss) + "," +
           (std::isnan(r.val_loss) ? std::string() : format_double(r.val_loss)) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string serialize_checkpoint(const ModelParameters& params) {
  std::string out = "LMMCKPT 1\n" + params.config.to_json() + "\n";
  const std::size_t start = out.size();
  out.resize(start + params.data.size() * sizeof(double));
  char* dst = out.data() + start;
  for (double x : params.data) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
    for (int b = 0; b < 8; ++b) *dst++ = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return out;
}

ModelParameters parse_checkpoint(std::string_view bytes) {
  const auto nl1 = bytes.find('\n');
  if (nl1 == std::string_view::npos || bytes.substr(0, nl1) != "LMMCKPT 1") {
    throw Error(ErrorCode::FormatError, "not a version-1 checkpoint");
  }
  const auto nl2 = bytes.find('\n', nl1 + 1);
  if (nl2 == std::string_view::npos) throw Error(ErrorCode::FormatError, "checkpoint header truncated");
  ModelParameters p;
  p.config = ModelConfig::from_json(std::string(bytes.substr(nl1 + 1, nl2 - nl1 - 1)));
  p.layout = make_layout(p.config);
  const std::size_t n = p.layout.back().offset + p.layout.back().size();
  const std::string_view raw = bytes.substr(nl2 + 1);
  if (raw.size() != n * sizeof(double)) {
    throw Error(ErrorCode::FormatError, "checkpoint holds " + std::to_string(raw.size()) + " bytes, expected " +
                                            std::to_string(n * sizeof(double)));
  }
  p.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[i * 8 + static_cast<std::size_t>(b)])) << (8 * b);
    }
    p.data[i] = std::bit_cast<double>(bits);
  }
  return p;
}

void save_checkpoint(const ModelParameters& params, const std::string& path) {
  write_file(path, serialize_checkpoint(params));
}

ModelParameters load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------

InferenceState::InferenceState(const ModelParameters& params) : params_(&params) {
  const auto& c = params.config;
  const auto d = static_cast<std::size_t>(c.d_model);
  keys_.assign(static_cast<std::size_t>(c.n_layers), AlignedDoubles(static_cast<std::size_t>(c.context_len) * d));
  values_ = keys_;
  x_.resize(d);
  h_.resize(d);
  qkv_.resize(3 * d);
  att_.resize(d);
  tmp_.resize(d);
  fc_.resize(4 * d);
  scores_.resize(static_cast<std::size_t>(c.context_len));
  logits_.resize(static_cast<std::size_t>(c.vocab_size));
}

void InferenceState::append(TokenId token) {
  const auto& p = *params_;
  const auto& c = p.config;
  if (length_ >= static_cast<std::size_t>(c.context_len)) {
    throw Error(ErrorCode::SequenceTooLong, "inference state is at context length");
  }
  if (token < 0 || token >= c.vocab_size) throw Error(ErrorCode::UnknownTokenId, "token id " + std::to_string(token));
  const std::size_t d = static_cast<std::size_t>(c.d_model), H = static_cast<std::size_t>(c.n_heads), dh = d / H;
  const std::size_t V = static_cast<std::size_t>(c.vocab_size), pos = length_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* w = p.data.data();
  const Offsets off = offsets_of(p.layout, c.n_layers);

  for (std::size_t i = 0; i < d; ++i) {
    x_[i] = w[off.wte + static_cast<std::size_t>(token) * d + i] + w[off.wpe + pos * d + i];
  }
  double mean = 0, rstd = 0;
  for (std::size_t l = 0; l < off.layers.size(); ++l) {
    const auto& lo = off.layers[l];
    layernorm_forward(x_.data(), 1, d, w + lo.ln1_g, w + lo.ln1_b, h_.data(), &mean, &rstd);
    RowVecMap qkv(qkv_.data(), 3 * d);
    qkv.noalias() = CRowVecMap(h_.data(), d) * CMatMap(w + lo.w_qkv, d, 3 * d);
    qkv += CRowVecMap(w + lo.b_qkv, 3 * d);
    double* kc = keys_[l].data();
    double* vc = values_[l].data();
    std::copy(qkv_.begin() + static_cast<std::ptrdiff_t>(d), qkv_.begin() + static_cast<std::ptrdiff_t>(2 * d), kc + pos * d);
    std::copy(qkv_.begin() + static_cast<std::ptrdiff_t>(2 * d), qkv_.end(), vc + pos * d);
    for (std::size_t h = 0; h < H; ++h) {
      const double* q = qkv_.data() + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= pos; ++j) {
        const double* k = kc + j * d + h * dh;
        double s = 0.0;
        for (std::size_t i = 0; i < dh; ++i) s += q[i] * k[i];
        scores_[j] = s * scale;
        mx = std::max(mx, scores_[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j <= pos; ++j) {
        scores_[j] = std::exp(scores_[j] - mx);
        sum += scores_[j];
      }
      double* y = att_.data() + h * dh;
      std::fill(y, y + dh, 0.0);
      for (std::size_t j = 0; j <= pos; ++j) {
        const double a = scores_[j] / sum;
        const double* v = vc + j * d + h * dh;
        for (std::size_t i = 0; i < dh; ++i) y[i] += a * v[i];
      }
    }
    RowVecMap tmp(tmp_.data(), d);
    tmp.noalias() = CRowVecMap(att_.data(), d) * CMatMap(w + lo.w_o, d, d);
    tmp += CRowVecMap(w + lo.b_o, d);
    RowVecMap x(x_.data(), d);
    x += tmp;
    layernorm_forward(x_.data(), 1, d, w + lo.ln2_g, w + lo.ln2_b, h_.data(), &mean, &rstd);
    RowVecMap fc(fc_.data(), 4 * d);
    fc.noalias() = CRowVecMap(h_.data(), d) * CMatMap(w + lo.w_fc, d, 4 * d);
    fc += CRowVecMap(w + lo.b_fc, 4 * d);
    for (auto& f : fc_) f = gelu(f);
    tmp.noalias() = CRowVecMap(fc_.data(), 4 * d) * CMatMap(w + lo.w_proj, 4 * d, d);
    tmp += CRowVecMap(w + lo.b_proj, d);
    x += tmp;
  }
  layernorm_forward(x_.data(), 1, d, w + off.lnf_g, w + off.lnf_b, h_.data(), &mean, &rstd);
  VecMap(logits_.data(), V).noalias() = CMatMap(w + off.wte, V, d) * CVecMap(h_.data(), d);
  ++length_;
}

TokenId sample_from_logits(std::span<const double> logits, double temperature, int top_k, Rng& rng) {
  if (logits.empty()) throw Error(ErrorCode::ConfigError, "empty logits");
  if (temperature < 0 || top_k < 0) throw Error(ErrorCode::ConfigError, "temperature and top_k must be >= 0");
  const std::size_t V = logits.size();
  auto better = [&](std::size_t a, std::size_t b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  };
  if (temperature == 0.0 || top_k == 1) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < V; ++i) {
      if (better(i, best)) best = i;
    }
    return static_cast<TokenId>(best);
  }
  std::vector<std::size_t> ids(V);
  std::iota(ids.begin(), ids.end(), 0);
  if (top_k > 0 && static_cast<std::size_t>(top_k) < V) {
    std::partial_sort(ids.begin(), ids.begin() + top_k, ids.end(), better);
    ids.resize(static_cast<std::size_t>(top_k));
    std::sort(ids.begin(), ids.end());
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (auto i : ids) mx = std::max(mx, logits[i]);
  AlignedDoubles weights(ids.size());
  double total = 0.0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    weights[k] = std::exp((logits[ids[k]] - mx) / temperature);
    total += weights[k];
  }
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    acc += weights[k];
    if (u < acc) return static_cast<TokenId>(ids[k]);
  }
  for (std::size_t k = ids.size(); k-- > 0;) {
    if (weights[k] > 0) return static_cast<TokenId>(ids[k]);
  }
  return static_cast<TokenId>(ids.back());
}

TokenId sample_next(const ModelParameters& params, std::span<const TokenId> prefix, double temperature, int top_k,
                    Rng& rng) {
  if (prefix.size() >= static_cast<std::size_t>(params.config.context_len)) {
    throw Error(ErrorCode::PrefixTooLong, "prefix of " + std::to_string(prefix.size()) + " tokens leaves no room");
  }
  const auto logits = forward(params, prefix);
  const std::size_t V = static_cast<std::size_t>(params.config.vocab_size);
  return sample_from_logits(std::span<const double>(logits.data() + (prefix.size() - 1) * V, V), temperature, top_k,
                            rng);
}

}  // namespace lmm::model
