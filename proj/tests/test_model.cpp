#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "lmm/model.hpp"

using namespace lmm;
using namespace lmm::model;

namespace {

ModelConfig tiny_config(int vocab = 11) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.context_len = 8;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.threads = 1;
  return c;
}

/// Every parameter random, so norms and biases take part in the checks.
ModelParameters random_params(const ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
  auto p = init_params(c, seed);
  Rng rng(seed + 1);
  for (auto& x : p.data) x = scale * rng.normal();
  return p;
}

// Straightforward single-position reference implementation, written from the
// architecture description: pre-norm blocks, causal softmax attention, GELU
// MLP with 4x width, final norm, tied output embedding.
std::vector<double> reference_logits(const ModelParameters& p, const std::vector<TokenId>& tokens) {
  const auto& c = p.config;
  const std::size_t T = tokens.size(), d = static_cast<std::size_t>(c.d_model);
  const std::size_t H = static_cast<std::size_t>(c.n_heads), dh = d / H, V = static_cast<std::size_t>(c.vocab_size);
  auto W = [&](const std::string& name) { return p.view(p.tensor(name)); };
  using Mat = std::vector<std::vector<double>>;
  auto layernorm = [&](const std::vector<double>& x, std::span<const double> g, std::span<const double> b) {
    double m = 0, v = 0;
    for (double xi : x) m += xi;
    m /= static_cast<double>(d);
    for (double xi : x) v += (xi - m) * (xi - m);
    v /= static_cast<double>(d);
    std::vector<double> out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - m) / std::sqrt(v + 1e-5) * g[i] + b[i];
    return out;
  };
  auto affine = [](const std::vector<double>& x, std::span<const double> w, std::span<const double> b, std::size_t out) {
    std::vector<double> y(b.begin(), b.end());
    for (std::size_t j = 0; j < out; ++j) {
      for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * w[i * out + j];
    }
    return y;
  };
  Mat x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      x[t][i] = W("wte")[static_cast<std::size_t>(tokens[t]) * d + i] + W("wpe")[t * d + i];
    }
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string pre = "h" + std::to_string(l) + ".";
    Mat qkv(T);
    for (std::size_t t = 0; t < T; ++t) {
      qkv[t] = affine(layernorm(x[t], W(pre + "ln1_g"), W(pre + "ln1_b")), W(pre + "w_qkv"), W(pre + "b_qkv"), 3 * d);
    }
    Mat next(T);
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> y(d, 0.0);
      for (std::size_t h = 0; h < H; ++h) {
        std::vector<double> s(t + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= t; ++j) {
          double dot = 0;
          for (std::size_t k = 0; k < dh; ++k) dot += qkv[t][h * dh + k] * qkv[j][d + h * dh + k];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= t; ++j) {
          for (std::size_t k = 0; k < dh; ++k) y[h * dh + k] += s[j] / z * qkv[j][2 * d + h * dh + k];
        }
      }
      const auto o = affine(y, W(pre + "w_o"), W(pre + "b_o"), d);
      for (std::size_t i = 0; i < d; ++i) y[i] = x[t][i] + o[i];
      auto f = affine(layernorm(y, W(pre + "ln2_g"), W(pre + "ln2_b")), W(pre + "w_fc"), W(pre + "b_fc"), 4 * d);
      for (auto& v : f) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
      const auto m = affine(f, W(pre + "w_proj"), W(pre + "b_proj"), d);
      for (std::size_t i = 0; i < d; ++i) y[i] += m[i];
      next[t] = y;
    }
    x = next;
  }
  std::vector<double> logits(T * V);
  for (std::size_t t = 0; t < T; ++t) {
    const auto h = layernorm(x[t], W("lnf_g"), W("lnf_b"));
    for (std::size_t v = 0; v < V; ++v) {
      double s = 0;
      for (std::size_t i = 0; i < d; ++i) s += h[i] * W("wte")[v * d + i];
      logits[t * V + v] = s;
    }
  }
  return logits;
}

std::vector<double> row(const std::vector<double>& logits, std::size_t t, std::size_t V) {
  return {logits.begin() + static_cast<std::ptrdiff_t>(t * V), logits.begin() + static_cast<std::ptrdiff_t>((t + 1) * V)};
}

}  // namespace

TEST_CASE("config validation") {
  auto c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny_config();
  c.vocab_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny_config();
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny_config();
  CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("parameter count matches the architecture") {
  const auto c = tiny_config();
  const std::size_t V = 11, T = 8, d = 8, L = 2;
  const std::size_t per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
  const auto p = init_params(c, 1);
  CHECK(p.size() == V * d + T * d + L * per_layer + 2 * d);
}

TEST_CASE("initialization statistics") {
  ModelConfig c = tiny_config(400);
  c.d_model = 64;
  c.context_len = 64;
  const auto p = init_params(c, 3);
  for (const auto& t : p.layout) {
    const auto v = p.view(t);
    if (t.role == TensorRole::NormScale) {
      for (double x : v) CHECK(x == 1.0);
    } else if (t.rows == 1) {
      for (double x : v) CHECK(x == 0.0);
    } else {
      double s = 0, sq = 0;
      for (double x : v) {
        s += x;
        sq += x * x;
      }
      const double n = static_cast<double>(v.size());
      CHECK(std::abs(s / n) < 4 * c.init_std / std::sqrt(n));
      CHECK(std::sqrt(sq / n) == doctest::Approx(c.init_std).epsilon(0.1));
    }
  }
  CHECK(init_params(c, 3) == p);
  CHECK_FALSE(init_params(c, 4) == p);
}

TEST_CASE("forward agrees with the reference implementation") {
  const auto c = tiny_config();
  const auto p = random_params(c, 9);
  const std::vector<TokenId> tokens{1, 4, 7, 7, 2, 10, 0, 5};
  const auto got = forward(p, tokens);
  const auto want = reference_logits(p, tokens);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("attention is causal and rows are distributions") {
  const auto c = tiny_config();
  const auto p = random_params(c, 2);
  const std::vector<TokenId> tokens{1, 3, 5, 7, 9, 2, 4, 6};
  ForwardTrace trace;
  const auto base = forward(p, tokens, &trace);
  const std::size_t T = tokens.size(), V = 11;
  for (const auto& layer : trace.attention) {
    for (const auto& a : layer) {
      for (std::size_t t = 0; t < T; ++t) {
        double s = 0;
        for (std::size_t j = 0; j < T; ++j) {
          if (j > t) CHECK(a[t * T + j] == 0.0);
          s += a[t * T + j];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
  // Changing a later token leaves earlier logits untouched.
  for (std::size_t k = 0; k < T; ++k) {
    auto changed = tokens;
    changed[k] = (changed[k] + 1) % 11;
    const auto out = forward(p, changed);
    for (std::size_t t = 0; t < k; ++t) CHECK(row(out, t, V) == row(base, t, V));
    CHECK(row(out, k, V) != row(base, k, V));
  }
}

TEST_CASE("analytic gradients match central differences") {
  const auto c = tiny_config(7);
  auto p = random_params(c, 5, 0.4);
  std::vector<Example> batch{make_example(std::vector<TokenId>{1, 3, 0, 5, 6, 2}),
                             make_example(std::vector<TokenId>{1, 4, 4, 6, 2})};
  const auto lg = loss_and_grads(p, batch);
  CHECK(lg.positions == 8);  // one target is PAD and masked
  CHECK(mean_loss(p, batch, 1) == doctest::Approx(lg.loss).epsilon(1e-12));
  const double h = 1e-5;
  double worst = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double keep = p.data[k];
    p.data[k] = keep + h;
    const double up = mean_loss(p, batch, 1);
    p.data[k] = keep - h;
    const double down = mean_loss(p, batch, 1);
    p.data[k] = keep;
    const double numeric = (up - down) / (2 * h);
    const double err = std::abs(numeric - lg.grads[k]) / std::max(1e-4, std::abs(numeric) + std::abs(lg.grads[k]));
    worst = std::max(worst, err);
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("loss at initialization is close to log V") {
  ModelConfig c = tiny_config(50);
  c.context_len = 32;
  const auto p = init_params(c, 0);
  Rng rng(1);
  std::vector<Example> batch;
  for (int i = 0; i < 8; ++i) {
    std::vector<TokenId> t;
    for (int j = 0; j < 32; ++j) t.push_back(static_cast<TokenId>(1 + rng.below(49)));
    batch.push_back(make_example(t));
  }
  CHECK(mean_loss(p, batch) == doctest::Approx(std::log(50.0)).epsilon(0.01));
}

TEST_CASE("input validation") {
  const auto c = tiny_config();
  const auto p = init_params(c, 0);
  CHECK_THROWS_AS(forward(p, std::vector<TokenId>(9, 1)), Error);
  CHECK_THROWS_AS(forward(p, std::vector<TokenId>{1, 11}), Error);
  CHECK_THROWS_AS(forward(p, std::vector<TokenId>{}), Error);
  const std::vector<Example> masked{make_example(std::vector<TokenId>{1, 0, 0})};
  CHECK_THROWS_AS(loss_and_grads(p, masked), Error);
  CHECK_THROWS_AS(train({}, c), Error);
  CHECK_THROWS_AS(train({{"a", std::vector<TokenId>(10, 1)}}, c), Error);
}

TEST_CASE("incremental inference matches the full forward pass") {
  const auto c = tiny_config();
  const auto p = random_params(c, 8);
  const std::vector<TokenId> tokens{1, 5, 5, 9, 3, 2, 8, 10};
  const auto full = forward(p, tokens);
  InferenceState s(p);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    s.append(tokens[t]);
    CHECK(s.length() == t + 1);
    const auto want = row(full, t, 11);
    for (std::size_t v = 0; v < 11; ++v) CHECK(s.logits()[v] == doctest::Approx(want[v]).epsilon(1e-10));
  }
  CHECK_THROWS_AS(s.append(1), Error);
  InferenceState fresh(p);
  CHECK_THROWS_AS(fresh.append(11), Error);
}

TEST_CASE("sampling from logits") {
  Rng rng(3);
  const std::vector<double> logits{1.0, 3.0, 3.0, -std::numeric_limits<double>::infinity(), 2.0};
  CHECK(sample_from_logits(logits, 0.0, 0, rng) == 1);
  CHECK(sample_from_logits(logits, 1.0, 1, rng) == 1);
  CHECK_THROWS_AS(sample_from_logits(logits, -1.0, 0, rng), Error);
  CHECK_THROWS_AS(sample_from_logits({}, 1.0, 0, rng), Error);

  // Frequencies match softmax(logits / temperature) within 4 sigma.
  for (double temp : {1.0, 0.5, 2.0}) {
    std::vector<double> p(logits.size());
    double z = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] / temp));
    for (auto& x : p) x /= z;
    const int n = 200000;
    std::vector<int> counts(logits.size(), 0);
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_from_logits(logits, temp, 0, rng))];
    CHECK(counts[3] == 0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(std::abs(counts[i] / static_cast<double>(n) - p[i]) <= 4 * std::sqrt(p[i] * (1 - p[i]) / n) + 1e-12);
    }
  }
  // top-k keeps only the k largest.
  for (int i = 0; i < 2000; ++i) {
    const auto t = sample_from_logits(logits, 1.0, 2, rng);
    CHECK((t == 1 || t == 2));
  }
}

TEST_CASE("training memorizes a deterministic successor rule") {
  // Sequences: BOS, a random start token, then each token is followed by its
  // cyclic successor in 4..11, then EOS. Only the start is unpredictable.
  ModelConfig c;
  c.vocab_size = 12;
  c.context_len = 12;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.n_steps = 400;
  c.batch_size = 16;
  c.learning_rate = 1e-2;
  c.eval_every = 50;
  c.seed = 4;
  c.threads = 1;
  std::vector<TrainSequence> corpus;
  Rng rng(10);
  for (int i = 0; i < 400; ++i) {
    TrainSequence s{"S" + std::to_string(i), {1}};
    TokenId t = static_cast<TokenId>(4 + rng.below(8));
    for (int k = 0; k < 10; ++k) {
      s.tokens.push_back(t);
      t = static_cast<TokenId>(4 + (t - 4 + 1) % 8);
    }
    s.tokens.push_back(2);
    corpus.push_back(s);
  }
  const auto r = train(corpus, c);
  CHECK(r.n_train + r.n_val + r.n_test == corpus.size());
  REQUIRE(r.history.size() == 400);
  // Irreducible loss: log 8 on the first of 11 targets.
  const double floor = std::log(8.0) / 11.0;
  CHECK(r.best_val_loss < floor + 0.05);
  CHECK(r.history.front().train_loss > 2.0);
  CHECK(std::isnan(r.history[0].val_loss));
  CHECK_FALSE(std::isnan(r.history[49].val_loss));

  // Greedy decoding follows the rule.
  Rng g(0);
  std::vector<TokenId> prefix{1, 6};
  for (int k = 0; k < 5; ++k) prefix.push_back(sample_next(r.params, prefix, 0.0, 0, g));
  CHECK(prefix == std::vector<TokenId>{1, 6, 7, 8, 9, 10, 11});

  SUBCASE("deterministic and independent of thread count") {
    auto c2 = c;
    c2.n_steps = 30;
    c2.threads = 1;
    const auto a = train(corpus, c2);
    c2.threads = 3;
    const auto b = train(corpus, c2);
    CHECK(a.params == b.params);
    CHECK(history_csv(a.history) == history_csv(b.history));
  }
}

TEST_CASE("split assignment proportions") {
  std::size_t counts[3] = {0, 0, 0};
  const int n = 40000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<int>(assign_split("P" + std::to_string(i), 0))];
  CHECK(counts[0] / double(n) == doctest::Approx(0.95).epsilon(0.01));
  CHECK(counts[1] / double(n) == doctest::Approx(0.025).epsilon(0.1));
  CHECK(counts[2] / double(n) == doctest::Approx(0.025).epsilon(0.1));
  CHECK(assign_split("P1", 0) == assign_split("P1", 0));
}

TEST_CASE("history csv") {
  std::vector<LossRecord> h{{1, 2.5}, {2, 2.0, 2.25}};
  CHECK(history_csv(h) == "step,train_loss,val_loss\n1,2.5,\n2,2,2.25\n");
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto p = random_params(tiny_config(), 12);
  const auto bytes = serialize_checkpoint(p);
  CHECK(bytes.rfind("LMMCKPT 1\n", 0) == 0);
  const auto back = parse_checkpoint(bytes);
  CHECK(back == p);
  CHECK(back.config.to_json() == p.config.to_json());
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 1)), Error);
  CHECK_THROWS_AS(parse_checkpoint("LMMCKPT 2\n{}\n"), Error);
  const auto path = (std::filesystem::temp_directory_path() / "lmm_test.ckpt").string();
  save_checkpoint(p, path);
  CHECK(load_checkpoint(path) == p);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
}
