#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "cptr/model.hpp"
#include "cptr/patch.hpp"
#include "testutil.hpp"

using namespace cptr;
using namespace cptr::testutil;
using DT = TensorT<double>;

TEST_CASE("attention with a single key/value returns V for any query") {
  CounterRng rng(1);
  DT q = random_tensor({3, 4}, rng);
  DT k = random_tensor({1, 4}, rng);
  DT v = random_tensor({1, 5}, rng);
  auto res = scaled_dot_product_attention(q, k, v);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) CHECK(res.output(i, j) == doctest::Approx(v(0, j)));
  for (int i = 0; i < 3; ++i) CHECK(res.weights(i, 0) == doctest::Approx(1.0));
}

TEST_CASE("attention with equal logits returns the column mean of V") {
  DT q = DT::zeros({2, 4}); // zero query makes every logit equal
  CounterRng rng(2);
  DT k = random_tensor({5, 4}, rng);
  DT v = random_tensor({5, 3}, rng);
  auto res = scaled_dot_product_attention(q, k, v);
  for (int j = 0; j < 3; ++j) {
    double mean = 0.0;
    for (int r = 0; r < 5; ++r) mean += v(r, j);
    mean /= 5.0;
    CHECK(res.output(0, j) == doctest::Approx(mean).epsilon(1e-10));
  }
}

TEST_CASE("attention 2x3 hand oracle") {
  DT q({2, 2}, {1, 0, 0, 1});
  DT k({3, 2}, {1, 0, 0, 1, 1, 1});
  DT v({3, 2}, {1, 2, 3, 4, 5, 6});
  auto res = scaled_dot_product_attention(q, k, v);
  CHECK(res.weights(0, 0) == doctest::Approx(0.4011120926797859).epsilon(1e-9));
  CHECK(res.weights(0, 1) == doctest::Approx(0.1977758146404282).epsilon(1e-9));
  CHECK(res.weights(0, 2) == doctest::Approx(0.4011120926797859).epsilon(1e-9));
  CHECK(res.output(0, 0) == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(res.output(0, 1) == doctest::Approx(4.0).epsilon(1e-9));
  CHECK(res.output(1, 0) == doctest::Approx(3.4066725560787154).epsilon(1e-9));
  CHECK(res.output(1, 1) == doctest::Approx(4.406672556078716).epsilon(1e-9));
}

TEST_CASE("attention error paths") {
  DT q({2, 4}), k({3, 5}), v({3, 2});
  CHECK_THROWS_AS(scaled_dot_product_attention(q, k, v), ShapeError); // d_k mismatch
  DT k2({3, 4});
  BoolMask mask;
  mask.rows = 2;
  mask.cols = 3;
  mask.keep = {1, 0, 1, 0, 0, 0}; // second query fully masked
  CHECK_THROWS_WITH_AS(scaled_dot_product_attention(q, k2, v, &mask), doctest::Contains("every key masked"),
                       ValueError);
}

TEST_CASE("masked positions receive exactly zero weight") {
  CounterRng rng(3);
  DT q = random_tensor({4, 6}, rng);
  DT k = random_tensor({4, 6}, rng);
  DT v = random_tensor({4, 6}, rng);
  const BoolMask mask = BoolMask::causal(4);
  auto res = scaled_dot_product_attention(q, k, v, &mask);
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) CHECK(res.weights(i, j) == 0.0);
}

TEST_CASE("multi head attention reduces to single attention for identity projections") {
  CounterRng rng(4);
  DT x = random_tensor({3, 4}, rng);
  DT eye({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  auto mha = multi_head_attention(x, x, eye, eye, eye, eye, 1);
  auto plain = scaled_dot_product_attention(x, x, x);
  for (long long i = 0; i < plain.output.size(); ++i)
    CHECK(mha.output.data()[i] == doctest::Approx(plain.output.data()[i]).epsilon(1e-10));
}

TEST_CASE("multi head attention output shape law") {
  CounterRng rng(5);
  const int d = 8;
  DT xq = random_tensor({5, d}, rng);
  DT xkv = random_tensor({7, d}, rng);
  for (int h : {1, 2, 4, 8}) {
    DT wq = random_tensor({d, d}, rng), wk = random_tensor({d, d}, rng);
    DT wv = random_tensor({d, d}, rng), wo = random_tensor({d, d}, rng);
    auto res = multi_head_attention(xq, xkv, wq, wk, wv, wo, h);
    CHECK(res.output.shape() == std::vector<int>{5, d});
    CHECK(static_cast<int>(res.head_weights.size()) == h);
    for (const auto& w : res.head_weights) CHECK(w.shape() == std::vector<int>{5, 7});
  }
}

TEST_CASE("multi head attention gradient wrt W_O") {
  CounterRng rng(6);
  const int d = 6;
  DT x = random_tensor({4, d}, rng);
  DT wq = random_tensor({d, d}, rng), wk = random_tensor({d, d}, rng);
  DT wv = random_tensor({d, d}, rng), wo = random_tensor({d, d}, rng);
  const double err = max_grad_rel_err({wq, wk, wv, wo}, [&](const std::vector<DT>& in) {
    return sum(multi_head_attention(x, x, in[0], in[1], in[2], in[3], 2).output);
  });
  CHECK(err < 1e-4);
}

TEST_CASE("ffn zero weights broadcast the output bias; eval mode is deterministic") {
  CounterRng rng(7);
  DT x = random_tensor({3, 4}, rng);
  DT w1 = DT::zeros({4, 8}), b1 = DT::zeros({8});
  DT w2 = DT::zeros({8, 4});
  DT b2 = random_tensor({4}, rng);
  DT y = ffn_forward(x, w1, b1, w2, b2);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) CHECK(y(r, c) == doctest::Approx(b2.data()[c]));
  DT y2 = ffn_forward(x, w1, b1, w2, b2);
  for (long long i = 0; i < y.size(); ++i) CHECK(y.data()[i] == y2.data()[i]);
}

TEST_CASE("ffn 2-dim hand oracle") {
  DT x({1, 2}, {0.5, -1.0});
  DT w1({2, 3}, {1.0, -1.0, 0.5, 2.0, 0.5, -0.25});
  DT b1({3}, {0.1, -0.2, 0.0});
  DT w2({3, 2}, {1.0, 0.0, -0.5, 2.0, 0.25, 1.0});
  DT b2({2}, {0.01, -0.02});
  DT y = ffn_forward(x, w1, b1, w2, b2);
  CHECK(y.data()[0] == doctest::Approx(0.052415286864997156).epsilon(1e-9));
  CHECK(y.data()[1] == doctest::Approx(0.049564022104906583).epsilon(1e-9));
}

TEST_CASE("sublayer with zero branch is plain layer norm") {
  CounterRng rng(8);
  DT x = random_tensor({3, 6}, rng);
  DT gain = DT::ones({6}), bias = DT::zeros({6});
  DT y = sublayer(x, [](const DT& in) { return DT::zeros(in.shape()); }, gain, bias);
  DT ln = layer_norm(x, gain, bias, 1e-5);
  for (long long i = 0; i < y.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ln.data()[i]));
  // post-norm property: per-vector mean of the pre-affine output is ~0
  for (int r = 0; r < 3; ++r) {
    double mu = 0.0;
    for (int c = 0; c < 6; ++c) mu += y(r, c);
    CHECK(std::abs(mu / 6.0) < 1e-6);
  }
}

TEST_CASE("sublayer rejects a shape-changing branch") {
  DT x({2, 4});
  CHECK_THROWS_AS(sublayer(x, [](const DT&) { return DT::zeros({2, 5}); }, DT::ones({5}), DT::zeros({5})),
                  ShapeError);
}

TEST_CASE("sublayer gradient flows through the residual even with a detached branch") {
  CounterRng rng(9);
  DT x = random_tensor({2, 4}, rng);
  DT branch = random_tensor({2, 4}, rng);
  const double err = max_grad_rel_err({x}, [&](const std::vector<DT>& in) {
    return sum(sublayer(in[0], [&](const DT&) { return branch.detached(); }, DT::ones({4}).detached(),
                        DT::zeros({4}).detached()));
  });
  CHECK(err < 1e-4);
  TapeT<double> tape;
  DT xw = tape.watch(x);
  DT y = sublayer(xw, [&](const DT&) { return branch.detached(); }, DT::ones({4}).detached(),
                  DT::zeros({4}).detached());
  tape.backward(sum(y));
  DT g = tape.grad(xw);
  double norm = 0.0;
  for (long long i = 0; i < g.size(); ++i) norm += std::abs(g.data()[i]);
  CHECK(norm > 0.0);
}

TEST_CASE("sinusoid positions") {
  DT pe = sinusoid_positions<double>(6, 8);
  for (int i = 0; i < 4; ++i) {
    CHECK(pe(0, 2 * i) == doctest::Approx(0.0));
    CHECK(pe(0, 2 * i + 1) == doctest::Approx(1.0));
  }
  CHECK(pe(1, 0) == doctest::Approx(0.8414709848078965).epsilon(1e-12));
  CHECK(pe(1, 1) == doctest::Approx(0.54030230586813977).epsilon(1e-12));
  CHECK(pe(3, 4) == doctest::Approx(0.02999550020249566).epsilon(1e-12));
  for (long long i = 0; i < pe.size(); ++i) {
    CHECK(pe.data()[i] <= 1.0);
    CHECK(pe.data()[i] >= -1.0);
  }
  CHECK_THROWS_AS(sinusoid_positions<double>(4, 7), ValueError);
}

TEST_CASE("encoder output shape law over layer counts") {
  for (int layers : {1, 2, 6, 12}) {
    ModelConfig cfg = tiny_gradcheck_config();
    cfg.n_enc_layers = layers;
    ParamSetT<double> p = init_params<double>(cfg, 3);
    CounterRng rng(20);
    DT pa = random_tensor({cfg.n_patches(), cfg.d_model}, rng);
    AttentionTraceT<double> trace;
    DT memory = encoder_forward(cfg, p, pa, false, nullptr, &trace);
    CHECK(memory.shape() == std::vector<int>{cfg.n_patches(), cfg.d_model});
    CHECK(static_cast<int>(trace.encoder_self.size()) == layers);
    for (const auto& layer : trace.encoder_self) {
      CHECK(static_cast<int>(layer.size()) == cfg.n_heads);
      for (const auto& w : layer) {
        for (int r = 0; r < w.dim(0); ++r) {
          double s = 0.0;
          for (int c = 0; c < w.dim(1); ++c) s += w(r, c);
          CHECK(std::abs(s - 1.0) < 1e-6);
        }
      }
    }
  }
}

TEST_CASE("one-layer encoder matches an independently composed oracle") {
  ModelConfig cfg = tiny_gradcheck_config();
  ParamSetT<double> p = init_params<double>(cfg, 11);
  CounterRng rng(21);
  DT pa = random_tensor({cfg.n_patches(), cfg.d_model}, rng);
  DT enc = encoder_forward(cfg, p, pa);

  // hand composition: MHA sublayer then FFN sublayer, raw ops only
  auto mha = multi_head_attention(pa, pa, p.at("enc.0.self.wq"), p.at("enc.0.self.wk"), p.at("enc.0.self.wv"),
                                  p.at("enc.0.self.wo"), cfg.n_heads);
  DT x1 = layer_norm(add(pa, mha.output), p.at("enc.0.ln1.g"), p.at("enc.0.ln1.b"), 1e-5);
  DT h = gelu(linear(x1, p.at("enc.0.ffn.w1"), p.at("enc.0.ffn.b1")));
  DT f = linear(h, p.at("enc.0.ffn.w2"), p.at("enc.0.ffn.b2"));
  DT x2 = layer_norm(add(x1, f), p.at("enc.0.ln2.g"), p.at("enc.0.ln2.b"), 1e-5);
  for (long long i = 0; i < enc.size(); ++i) CHECK(std::abs(enc.data()[i] - x2.data()[i]) < 1e-5);
}

TEST_CASE("encoder rejects wrong patch counts") {
  ModelConfig cfg = tiny_gradcheck_config();
  ParamSetT<double> p = init_params<double>(cfg, 4);
  CHECK_THROWS_AS(encoder_forward(cfg, p, DT::zeros({cfg.n_patches() + 1, cfg.d_model})), ShapeError);
}

TEST_CASE("decoder logits shape and trace invariants") {
  ModelConfig cfg = tiny_gradcheck_config();
  cfg.n_dec_layers = 2;
  ParamSetT<double> p = init_params<double>(cfg, 5);
  CounterRng rng(22);
  DT memory = random_tensor({cfg.n_patches(), cfg.d_model}, rng);
  AttentionTraceT<double> trace;
  const std::vector<int> tokens = {kBosId, 4, 7, 9};
  DT logits = decoder_forward(cfg, p, tokens, memory, false, nullptr, &trace);
  CHECK(logits.shape() == std::vector<int>{4, cfg.vocab_size});
  REQUIRE(trace.decoder_self.size() == 2);
  REQUIRE(trace.decoder_cross.size() == 2);
  for (const auto& layer : trace.decoder_self)
    for (const auto& w : layer) {
      CHECK(w.shape() == std::vector<int>{4, 4});
      for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int c = 0; c < 4; ++c) s += w(r, c);
        CHECK(std::abs(s - 1.0) < 1e-6);
        for (int c = r + 1; c < 4; ++c) CHECK(w(r, c) == 0.0); // strictly causal
      }
    }
  for (const auto& layer : trace.decoder_cross)
    for (const auto& w : layer) {
      CHECK(w.shape() == std::vector<int>{4, cfg.n_patches()});
      for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int c = 0; c < w.dim(1); ++c) s += w(r, c);
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
}

TEST_CASE("decoder causality: future tokens cannot move past logits") {
  ModelConfig cfg = tiny_gradcheck_config();
  ParamSetT<double> p = init_params<double>(cfg, 6);
  CounterRng rng(23);
  DT memory = random_tensor({cfg.n_patches(), cfg.d_model}, rng);
  const std::vector<int> a = {kBosId, 4, 7, 9, 2};
  std::vector<int> b = a;
  b[3] = 10;
  b[4] = 5;
  DT la = decoder_forward(cfg, p, a, memory);
  DT lb = decoder_forward(cfg, p, b, memory);
  for (int t = 0; t < 3; ++t)
    for (int vcb = 0; vcb < cfg.vocab_size; ++vcb) CHECK(std::abs(la(t, vcb) - lb(t, vcb)) < 1e-6);
}

TEST_CASE("decoder input validation") {
  ModelConfig cfg = tiny_gradcheck_config();
  ParamSetT<double> p = init_params<double>(cfg, 7);
  DT memory = DT::zeros({cfg.n_patches(), cfg.d_model});
  CHECK_THROWS_WITH_AS(decoder_forward(cfg, p, {kBosId, 11}, memory), doctest::Contains("out of vocab"),
                       ValueError);
  std::vector<int> too_long(static_cast<size_t>(cfg.max_caption_len) + 1, 4);
  CHECK_THROWS_WITH_AS(decoder_forward(cfg, p, too_long, memory), doctest::Contains("position table"), ValueError);
  CHECK_THROWS_AS(decoder_forward(cfg, p, {}, memory), ValueError);
}

TEST_CASE("parameter names are unique and the count matches the closed form") {
  for (const ModelConfig& cfg : {ModelConfig{}, ModelConfig::toy(), tiny_gradcheck_config()}) {
    const auto shapes = param_shapes(cfg);
    std::set<std::string> names;
    long long total = 0;
    for (const auto& [name, shape] : shapes) {
      CHECK(names.insert(name).second);
      long long n = 1;
      for (int d : shape) n *= d;
      total += n;
    }
    CHECK(total == closed_form_param_count(cfg));
  }
  // instantiated parameters agree too
  ParamSetT<float> p = init_params<float>(ModelConfig::toy(), 1);
  CHECK(p.total_size() == closed_form_param_count(ModelConfig::toy()));
}

TEST_CASE("default config carries the published hyperparameters") {
  const ModelConfig cfg;
  CHECK(cfg.n_enc_layers == 12);
  CHECK(cfg.n_dec_layers == 4);
  CHECK(cfg.d_model == 768);
  CHECK(cfg.n_heads == 12);
  CHECK(cfg.patch_size == 16);
  CHECK(cfg.res_h == 384);
  CHECK(cfg.res_w == 384);
  CHECK(cfg.n_patches() == 576);
  CHECK(cfg.d_ffn == 4 * cfg.d_model);
}

TEST_CASE("initialization is seed-deterministic") {
  ParamSetT<float> a = init_params<float>(ModelConfig::toy(), 42);
  ParamSetT<float> b = init_params<float>(ModelConfig::toy(), 42);
  ParamSetT<float> c = init_params<float>(ModelConfig::toy(), 43);
  bool all_equal = true, any_diff = false;
  for (size_t i = 0; i < a.items.size(); ++i) {
    const auto& ta = a.items[i].second;
    const auto& tb = b.items[i].second;
    const auto& tc = c.items[i].second;
    for (long long j = 0; j < ta.size(); ++j) {
      all_equal = all_equal && (ta.data()[j] == tb.data()[j]);
      any_diff = any_diff || (ta.data()[j] != tc.data()[j]);
    }
  }
  CHECK(all_equal);
  CHECK(any_diff);
  // layernorm gains start at one, biases at zero
  CHECK(a.at("enc.0.ln1.g").data()[0] == 1.0f);
  CHECK(a.at("enc.0.ln1.b").data()[0] == 0.0f);
  CHECK(a.at("enc.0.ffn.b1").data()[0] == 0.0f);
}

TEST_CASE("full tiny model passes the finite-difference gradient check") {
  long long n_params = 0;
  const double err = full_model_fd_error(2024, &n_params);
  CHECK(n_params > 3000);
  CHECK(err < 1e-4);
}
