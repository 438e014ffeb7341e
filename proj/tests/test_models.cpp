#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "kgd/models.hpp"

#include "support/gradcheck.hpp"
#include "support/testutil.hpp"

using namespace kgd;

namespace {

FeatureVector random_features(Rng& rng, std::uint32_t dim, int n_items) {
  std::unordered_map<std::uint32_t, double> acc;
  for (int i = 0; i < n_items; ++i) {
    acc[std::uint32_t(rng.uniform_index(dim))] += rng.uniform_real() * 2.0 - 0.5;
  }
  return make_feature_vector(std::move(acc), dim);
}

LinearHead random_head(Rng& rng, std::uint32_t dim, double scale) {
  auto head = LinearHead::zeros(dim);
  for (auto& w : head.w) w = (rng.uniform_real() * 2.0 - 1.0) * scale;
  head.b = (rng.uniform_real() * 2.0 - 1.0) * scale;
  return head;
}

// independent forward pass written from the layer formulas, plain loops
std::vector<double> reference_lm_forward(const NeuralLM& lm, const std::vector<int>& window) {
  const int N = lm.window, d = lm.embed_dim, h = lm.hidden_dim, V = lm.vocab_size;
  std::vector<double> x;
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < d; ++j) x.push_back(lm.embed[std::size_t(window[i]) * d + j]);
  }
  std::vector<double> hid(h);
  for (int j = 0; j < h; ++j) {
    double s = lm.b1[j];
    for (int i = 0; i < N * d; ++i) s += x[i] * lm.w1[std::size_t(i) * h + j];
    hid[j] = std::tanh(s);
  }
  std::vector<double> logits(V);
  for (int v = 0; v < V; ++v) {
    double s = lm.b2[v];
    for (int j = 0; j < h; ++j) s += hid[j] * lm.w2[std::size_t(j) * V + v];
    logits[v] = s;
  }
  double mx = logits[0];
  for (double s : logits) mx = std::max(mx, s);
  double z = 0.0;
  for (double s : logits) z += std::exp(s - mx);
  std::vector<double> probs(V);
  for (int v = 0; v < V; ++v) probs[v] = std::exp(logits[v] - mx) / z;
  return probs;
}

}  // namespace

TEST_CASE("featurize") {
  const Featurizer fz(1u << 10);
  SECTION("empty sequence gives an empty vector") {
    CHECK(fz.features({}).items.empty());
  }
  SECTION("deterministic") {
    const TokenSeq toks = {"[CLS]", "a", "b", "[SEP]", "c", "[EOS]"};
    const auto f1 = fz.features(toks);
    const auto f2 = fz.features(toks);
    CHECK(f1.items == f2.items);
  }
  SECTION("overlap feature counts shared unigrams across the boundary") {
    const auto fv = fz.features({"[CLS]", "a", "b", "[SEP]", "a", "c", "[EOS]"});
    double overlap = -1.0;
    for (const auto& [id, v] : fv.items) {
      if (id == fz.dim() - 1) overlap = v;
    }
    CHECK(overlap == 1.0);
  }
  SECTION("no [SEP] means no interaction features") {
    const auto fv = fz.features({"[BOS]", "[user]", "a", "[EOS]"});
    for (const auto& [id, v] : fv.items) {
      CHECK(id != fz.dim() - 1);
      CHECK(id != fz.dim() - 2);
      CHECK(id != fz.dim() - 3);
    }
  }
  SECTION("entity match requires every entity token left of [SEP]") {
    const TokenSeq with = {"[CLS]", "arc", "hotel", "parking", "[SEP]", "x", "[EOS]"};
    const TokenSeq without = {"[CLS]", "arc", "parking", "[SEP]", "x", "[EOS]"};
    const TokenSeq entity = {"arc", "hotel"};
    auto value_at = [&](const FeatureVector& fv, std::uint32_t id) {
      for (const auto& [i, v] : fv.items) {
        if (i == id) return v;
      }
      return 0.0;
    };
    CHECK(value_at(fz.features(with, entity), fz.dim() - 3) == 1.0);
    CHECK(value_at(fz.features(without, entity), fz.dim() - 3) == 0.0);
  }
  SECTION("dimension below 2^10 is rejected") {
    CHECK_THROWS_AS(Featurizer(512), ConfigError);
  }
}

TEST_CASE("sigmoid_score") {
  const std::uint32_t dim = 1u << 10;
  Rng rng(11);
  SECTION("zero head scores 0.5") {
    const auto head = LinearHead::zeros(dim);
    CHECK(sigmoid_score(head, random_features(rng, dim, 5)) == 0.5);
  }
  SECTION("logit 10") {
    auto head = LinearHead::zeros(dim);
    head.b = 10.0;
    FeatureVector empty;
    empty.dim = dim;
    CHECK(sigmoid_score(head, empty) == Catch::Approx(0.9999546021312976).epsilon(1e-9));
  }
  SECTION("matches an extended-precision evaluation") {
    for (int iter = 0; iter < 50; ++iter) {
      const auto head = random_head(rng, dim, 0.3);
      const auto x = random_features(rng, dim, 8);
      long double z = head.b;
      for (const auto& [id, v] : x.items) z += (long double)head.w[id] * (long double)v;
      const long double expected = 1.0L / (1.0L + std::exp(-z));
      CHECK(sigmoid_score(head, x) == Catch::Approx(double(expected)).margin(1e-12));
    }
  }
}

TEST_CASE("bce loss values") {
  const std::uint32_t dim = 1u << 10;
  SECTION("p=0.5, y=1 costs ln 2") {
    const auto head = LinearHead::zeros(dim);
    FeatureVector x;
    x.dim = dim;
    std::vector<BceExample> ex = {{x, 1.0}};
    HeadGrad grad(head);
    CHECK(bce_loss_grad(head, ex, 0.0, grad) == Catch::Approx(std::log(2.0)).margin(1e-12));
  }
  SECTION("saturated correct prediction costs ~0 at the clamp boundary") {
    auto head = LinearHead::zeros(dim);
    head.b = 80.0;  // sigmoid indistinguishable from 1
    FeatureVector x;
    x.dim = dim;
    std::vector<BceExample> ex = {{x, 1.0}};
    HeadGrad grad(head);
    const double loss = bce_loss_grad(head, ex, 0.0, grad);
    CHECK(loss >= 0.0);
    CHECK(loss < 1e-9);
  }
}

TEST_CASE("bce gradient matches central finite differences") {
  const std::uint32_t dim = 64;
  Rng rng(17);
  for (int iter = 0; iter < 25; ++iter) {
    auto head = random_head(rng, dim, 0.4);
    std::vector<BceExample> ex;
    const int n = 1 + int(rng.uniform_index(4));
    for (int i = 0; i < n; ++i) {
      ex.push_back({random_features(rng, dim, 6), double(rng.uniform_index(2))});
    }
    const double l2 = iter % 3 == 0 ? 0.01 : 0.0;
    HeadGrad grad(head);
    bce_loss_grad(head, ex, l2, grad);
    const double err = gradcheck::max_gradient_error(
        gradcheck::head_param_ptrs(head), gradcheck::head_grad_flat(grad), [&] {
          HeadGrad g(head);
          return bce_loss_grad(head, ex, l2, g);
        });
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("softmax cross entropy") {
  const std::uint32_t dim = 1u << 10;
  Rng rng(23);
  SECTION("identical candidates cost ln(count)") {
    const auto head = random_head(rng, dim, 0.2);
    const auto x = random_features(rng, dim, 5);
    std::vector<FeatureVector> cands(5, x);
    HeadGrad grad(head);
    CHECK(softmax_ce_loss_grad(head, cands, 0.0, grad) ==
          Catch::Approx(std::log(5.0)).margin(1e-12));
  }
  SECTION("a 20-logit margin makes the loss negligible") {
    auto head = LinearHead::zeros(dim);
    head.w[0] = 20.0;
    FeatureVector gold;
    gold.dim = dim;
    gold.items = {{0u, 1.0}};
    FeatureVector other;
    other.dim = dim;
    std::vector<FeatureVector> cands = {gold, other, other};
    HeadGrad grad(head);
    CHECK(softmax_ce_loss_grad(head, cands, 0.0, grad) < 1e-8);
  }
  SECTION("shifting the bias leaves the loss unchanged") {
    auto head = random_head(rng, dim, 0.3);
    std::vector<FeatureVector> cands;
    for (int i = 0; i < 4; ++i) cands.push_back(random_features(rng, dim, 6));
    HeadGrad g1(head), g2(head);
    const double before = softmax_ce_loss_grad(head, cands, 0.0, g1);
    head.b += 123.456;
    const double after = softmax_ce_loss_grad(head, cands, 0.0, g2);
    CHECK(after == Catch::Approx(before).margin(1e-9));
  }
}

TEST_CASE("softmax gradient matches central finite differences") {
  const std::uint32_t dim = 64;
  Rng rng(29);
  for (int iter = 0; iter < 25; ++iter) {
    auto head = random_head(rng, dim, 0.4);
    std::vector<FeatureVector> cands;
    const int n = 2 + int(rng.uniform_index(4));
    for (int i = 0; i < n; ++i) cands.push_back(random_features(rng, dim, 6));
    const double l2 = iter % 3 == 0 ? 0.01 : 0.0;
    HeadGrad grad(head);
    softmax_ce_loss_grad(head, cands, l2, grad);
    const double err = gradcheck::max_gradient_error(
        gradcheck::head_param_ptrs(head), gradcheck::head_grad_flat(grad), [&] {
          HeadGrad g(head);
          return softmax_ce_loss_grad(head, cands, l2, g);
        });
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("lm_forward") {
  SECTION("zero output layer gives the uniform distribution") {
    auto lm = NeuralLM::init(16, 3, 4, 5, 0.05, 1);
    std::fill(lm.w2.begin(), lm.w2.end(), 0.0);
    std::fill(lm.b2.begin(), lm.b2.end(), 0.0);
    const std::vector<int> window = {kPad, 9, 12};
    const auto probs = lm_forward(lm, window);
    for (const double p : probs) CHECK(p == Catch::Approx(1.0 / 16.0).margin(1e-12));
  }
  SECTION("deterministic and normalized") {
    const auto lm = NeuralLM::init(32, 4, 6, 7, 0.05, 2);
    const std::vector<int> window = {1, 2, 3, 4};
    const auto p1 = lm_forward(lm, window);
    const auto p2 = lm_forward(lm, window);
    CHECK(p1 == p2);
    double sum = 0.0;
    for (const double p : p1) sum += p;
    CHECK(sum == Catch::Approx(1.0).margin(1e-6));
  }
  SECTION("matches an independently coded forward pass") {
    Rng rng(31);
    for (int iter = 0; iter < 20; ++iter) {
      const auto lm = NeuralLM::init(9 + 7, 2, 3, 4, 0.3, 100 + std::uint64_t(iter));
      std::vector<int> window = {int(rng.uniform_index(16)), int(rng.uniform_index(16))};
      const auto got = lm_forward(lm, window);
      const auto expected = reference_lm_forward(lm, window);
      for (int v = 0; v < lm.vocab_size; ++v) {
        CHECK(got[v] == Catch::Approx(expected[v]).margin(1e-10));
      }
    }
  }
}

TEST_CASE("lm_nll_grad") {
  SECTION("uniform model costs ln V per predicted position") {
    auto lm = NeuralLM::init(9 + 2, 2, 3, 4, 0.05, 3);
    std::fill(lm.w2.begin(), lm.w2.end(), 0.0);
    std::fill(lm.b2.begin(), lm.b2.end(), 0.0);
    const LmSequence seq{{9, 10, 9, 10}, 1};
    LmGrad grad(lm);
    const double loss = lm_nll_grad(lm, seq, grad);
    CHECK(loss == Catch::Approx(3.0 * std::log(11.0)).margin(1e-9));
  }
  SECTION("prompt region produces no loss") {
    const auto lm = NeuralLM::init(9 + 4, 2, 3, 4, 0.2, 4);
    LmSequence seq{{9, 10, 11, 12}, 3};
    LmGrad g1(lm);
    const double loss1 = lm_nll_grad(lm, seq, g1);
    // permute a prompt-internal future token; the single predicted position
    // at t=3 only conditions on positions 1..2, so swapping ids at 0 with a
    // pad-distance region must leave the loss over t=3 unchanged
    LmSequence seq2{{13, 10, 11, 12}, 3};
    LmGrad g2(lm);
    const double loss2 = lm_nll_grad(lm, seq2, g2);
    CHECK(loss1 == Catch::Approx(loss2).margin(1e-12));
  }
  SECTION("every parameter group passes the finite-difference check") {
    Rng rng(37);
    for (int iter = 0; iter < 10; ++iter) {
      auto lm = NeuralLM::init(9 + 5, 2, 3, 4, 0.3, 200 + std::uint64_t(iter));
      LmSequence seq;
      const std::size_t len = 3 + rng.uniform_index(4);
      for (std::size_t i = 0; i < len; ++i) seq.ids.push_back(int(rng.uniform_index(14)));
      seq.first_predicted = 1 + rng.uniform_index(len - 1);
      LmGrad grad(lm);
      lm_nll_grad(lm, seq, grad);
      const double err = gradcheck::max_gradient_error(
          gradcheck::lm_param_ptrs(lm), gradcheck::lm_grad_flat(grad), [&] {
            LmGrad g(lm);
            return lm_nll_grad(lm, seq, g);
          });
      CHECK(err <= 1e-4);
    }
  }
}

TEST_CASE("sgd_train") {
  const std::uint32_t dim = 1u << 10;

  SECTION("zero learning rate leaves parameters unchanged") {
    auto head = LinearHead::zeros(dim);
    head.b = 0.25;
    const auto before = head;
    Rng rng(41);
    std::vector<BceExample> ex = {{random_features(rng, dim, 4), 1.0},
                                  {random_features(rng, dim, 4), 0.0}};
    TrainConfig config;
    config.lr = 0.0;
    config.epochs = 5;
    sgd_train<LinearHead, HeadGrad>(head, ex.size(), config,
                                    [&](const LinearHead& h, std::span<const std::size_t> idx,
                                        HeadGrad& grad) {
                                      std::vector<BceExample> batch;
                                      for (auto i : idx) batch.push_back(ex[i]);
                                      return bce_loss_grad(h, batch, config.l2, grad);
                                    });
    CHECK(head.w == before.w);
    CHECK(head.b == before.b);
  }

  SECTION("separable two-feature set reaches training accuracy 1 within 50 epochs") {
    // y = 1 iff feature 0 present, feature 1 marks negatives
    std::vector<BceExample> ex;
    for (int i = 0; i < 20; ++i) {
      FeatureVector x;
      x.dim = dim;
      x.items = {{std::uint32_t(i % 2), 1.0}};
      ex.push_back({x, i % 2 == 0 ? 1.0 : 0.0});
    }
    auto head = LinearHead::zeros(dim);
    TrainConfig config;
    config.epochs = 50;
    config.lr = 0.5;
    sgd_train<LinearHead, HeadGrad>(head, ex.size(), config,
                                    [&](const LinearHead& h, std::span<const std::size_t> idx,
                                        HeadGrad& grad) {
                                      std::vector<BceExample> batch;
                                      for (auto i : idx) batch.push_back(ex[i]);
                                      return bce_loss_grad(h, batch, config.l2, grad);
                                    });
    int correct = 0;
    for (const auto& e : ex) {
      const double p = sigmoid_score(head, e.x);
      if ((p >= 0.5 ? 1.0 : 0.0) == e.y) ++correct;
    }
    CHECK(correct == int(ex.size()));
  }

  SECTION("identical seeds give bitwise-identical traces") {
    Rng rng(43);
    std::vector<BceExample> ex;
    for (int i = 0; i < 30; ++i) {
      ex.push_back({random_features(rng, dim, 5), double(rng.uniform_index(2))});
    }
    TrainConfig config;
    config.epochs = 8;
    auto run = [&] {
      auto head = LinearHead::zeros(dim);
      return sgd_train<LinearHead, HeadGrad>(
          head, ex.size(), config,
          [&](const LinearHead& h, std::span<const std::size_t> idx, HeadGrad& grad) {
            std::vector<BceExample> batch;
            for (auto i : idx) batch.push_back(ex[i]);
            return bce_loss_grad(h, batch, config.l2, grad);
          });
    };
    const auto t1 = run();
    const auto t2 = run();
    CHECK(t1 == t2);
  }

  SECTION("absurd learning rate on the LM raises DivergedError") {
    auto lm = NeuralLM::init(9 + 6, 2, 3, 4, 0.05, 5);
    std::vector<LmSequence> seqs;
    Rng rng(47);
    for (int i = 0; i < 8; ++i) {
      LmSequence s;
      for (int t = 0; t < 6; ++t) s.ids.push_back(int(9 + rng.uniform_index(6)));
      seqs.push_back(s);
    }
    TrainConfig config;
    config.lr = 1e6;
    config.epochs = 50;
    CHECK_THROWS_AS(
        (sgd_train<NeuralLM, LmGrad>(lm, seqs.size(), config,
                                     [&](const NeuralLM& m, std::span<const std::size_t> idx,
                                         LmGrad& grad) {
                                       double loss = 0.0;
                                       for (auto i : idx) loss += lm_nll_grad(m, seqs[i], grad);
                                       return loss;
                                     })),
        DivergedError);
  }
}

TEST_CASE("overfitting one sequence drives its loss under 0.1") {
  auto lm = NeuralLM::init(9 + 8, 3, 8, 16, 0.05, 6);
  const LmSequence seq{{kBos, 9, 10, 11, 12, 13, kEos}, 1};
  TrainConfig config;
  config.lr = 0.5;
  config.epochs = 200;
  config.batch_size = 1;
  const auto trace = sgd_train<NeuralLM, LmGrad>(
      lm, 1, config,
      [&](const NeuralLM& m, std::span<const std::size_t>, LmGrad& grad) {
        return lm_nll_grad(m, seq, grad);
      });
  CHECK(trace.back() < 0.1);
}

TEST_CASE("checkpoints round trip bitwise") {
  testutil::TempDir tmp;
  SECTION("linear head") {
    Rng rng(53);
    const auto head = random_head(rng, 1u << 12, 0.7);
    save_head(tmp.file("head.ckpt"), head);
    const auto loaded = load_head(tmp.file("head.ckpt"));
    CHECK(loaded.w == head.w);
    CHECK(loaded.b == head.b);
  }
  SECTION("language model") {
    const auto lm = NeuralLM::init(64, 4, 8, 12, 0.05, 7);
    save_lm(tmp.file("lm.ckpt"), lm);
    const auto loaded = load_lm(tmp.file("lm.ckpt"));
    CHECK(loaded.vocab_size == lm.vocab_size);
    CHECK(loaded.window == lm.window);
    CHECK(loaded.embed == lm.embed);
    CHECK(loaded.w1 == lm.w1);
    CHECK(loaded.b1 == lm.b1);
    CHECK(loaded.w2 == lm.w2);
    CHECK(loaded.b2 == lm.b2);
  }
  SECTION("magic mismatch is a ParseError") {
    testutil::write_file(tmp.file("junk.ckpt"), "NOTAMODELxxxxxxxxxxxxxxxxxxx");
    CHECK_THROWS_AS(load_head(tmp.file("junk.ckpt")), ParseError);
    CHECK_THROWS_AS(load_lm(tmp.file("junk.ckpt")), ParseError);
  }
  SECTION("missing file is an IoError") {
    CHECK_THROWS_AS(load_head(tmp.file("absent.ckpt")), IoError);
  }
}
