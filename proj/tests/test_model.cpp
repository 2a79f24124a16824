#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"
#include "tmlab/errors.hpp"
#include "tmlab/model.hpp"

using namespace tmlab;
using model::Domain;
using model::Mode;

namespace {

data::TimeSeriesSample duplicate_pixels(const data::TimeSeriesSample& s) {
  auto out = s;
  out.pixels_per_step = 2 * s.pixels_per_step;
  out.pixels.resize(s.channels(), 2 * s.pixels.cols());
  for (Eigen::Index t = 0; t < s.timesteps(); ++t) {
    out.pixels.middleCols(t * out.pixels_per_step, s.pixels_per_step) = s.step(t);
    out.pixels.middleCols(t * out.pixels_per_step + s.pixels_per_step, s.pixels_per_step) = s.step(t);
  }
  return out;
}

data::TimeSeriesSample permute_pixels(const data::TimeSeriesSample& s, Rng& rng) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(s.pixels_per_step));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto out = s;
  for (Eigen::Index t = 0; t < s.timesteps(); ++t)
    for (std::size_t n = 0; n < order.size(); ++n)
      out.pixels.col(t * s.pixels_per_step + static_cast<Eigen::Index>(n)) =
          s.step(t).col(order[n]);
  return out;
}

// Eval-mode statistics that differ from identity, so the domain tag matters.
template <typename Scalar>
void randomize_running_stats(model::ModelParams<Scalar>& p, Domain d, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  p.norm_for(d).for_each([&](std::string_view, auto& v) {
    for (Eigen::Index j = 0; j < v.size(); ++j) v[j] = static_cast<Scalar>(u(rng));
  });
}

}  // namespace

TEST_CASE("positional encoding of day 0 with no offset alternates 0 and 1") {
  const std::vector<int> days{0};
  const auto pe = model::positional_encoding(days, {8, 0, 10000.0});
  for (Eigen::Index m = 0; m < 4; ++m) {
    CHECK(pe(0, 2 * m) == 0.0);
    CHECK(pe(0, 2 * m + 1) == 1.0);
  }
}

TEST_CASE("positional encoding offset equals shifting the day") {
  const std::vector<int> days{-40, 5, 200};
  const std::vector<int> moved{20, 65, 260};
  CHECK(model::positional_encoding(days, {16, 60, 10000.0}) ==
        model::positional_encoding(moved, {16, 0, 10000.0}));
}

TEST_CASE("positional encoding matches the sinusoid formula") {
  const std::vector<int> days{37};
  const auto pe = model::positional_encoding(days, {6, 10, 100.0});
  for (int m = 0; m < 3; ++m) {
    const double angle = 47.0 / std::pow(100.0, 2.0 * m / 6.0);
    CHECK(pe(0, 2 * m) == doctest::Approx(std::sin(angle)).epsilon(1e-14));
    CHECK(pe(0, 2 * m + 1) == doctest::Approx(std::cos(angle)).epsilon(1e-14));
  }
}

TEST_CASE("positional encoding is stable across configurations and far positions") {
  const std::vector<int> days{37, 5000, 12, 37};
  const model::PosEncConfig a{6, 10, 100.0}, b{8, 60, 10000.0};
  const auto first = model::positional_encoding(days, a);
  model::positional_encoding(days, b);
  CHECK(model::positional_encoding(days, a) == first);
  CHECK(first.row(0) == first.row(3));
  for (int m = 0; m < 3; ++m) {
    const double angle = 5010.0 / std::pow(100.0, 2.0 * m / 6.0);
    CHECK(first(1, 2 * m) == doctest::Approx(std::sin(angle)).epsilon(1e-12));
    CHECK(first(1, 2 * m + 1) == doctest::Approx(std::cos(angle)).epsilon(1e-12));
  }
}

TEST_CASE("positional encoding rejects days below the offset") {
  const std::vector<int> days{-61};
  CHECK_THROWS_AS(model::positional_encoding(days, {8, 60, 10000.0}), ShiftRangeError);
}

TEST_CASE("forward outputs are distributions and attention sums to one") {
  const auto p = testing::tiny_params<float>(1);
  Rng rng(2);
  std::vector<data::TimeSeriesSample> batch;
  for (int i = 0; i < 6; ++i) batch.push_back(testing::random_sample(rng, 2 + i, 3 + i % 2, 4));
  const std::vector<int> shifts{0, 5, -5, 60, -60, 13};
  for (Mode mode : {Mode::train, Mode::eval}) {
    const auto out = model::forward<float>(p, batch, shifts, Domain::target, mode);
    CHECK(out.probs.cols() == 6);
    CHECK(out.probs.minCoeff() >= 0.0f);
    for (Eigen::Index i = 0; i < 6; ++i) CHECK(std::abs(out.probs.col(i).sum() - 1.0f) < 1e-6);
    for (const auto& a : out.cache.attention) CHECK(std::abs(a.sum() - 1.0f) < 1e-6);
  }
}

TEST_CASE("single time step: attention is one and output is the head of its value") {
  const auto p = testing::tiny_params<double>(3);
  Rng rng(4);
  const auto s = testing::random_sample(rng, 1, 5, 4, 100);
  const auto out = model::forward<double>(p, s, 0, Domain::source, Mode::eval);
  REQUIRE(out.cache.attention[0].size() == 1);
  CHECK(out.cache.attention[0][0] == 1.0);

  const auto& w = p.weights;
  const Eigen::VectorXd value = w.value_w * out.cache.tokens.col(0) + w.value_b;
  const Eigen::VectorXd pre = w.head1_w * value + w.head1_b;
  const Eigen::VectorXd act =
      pre.unaryExpr([](double x) { return 0.5 * x * (1 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x))); });
  const Eigen::VectorXd logits = w.head2_w * act + w.head2_b;
  Eigen::VectorXd expected = (logits.array() - logits.maxCoeff()).exp();
  expected /= expected.sum();
  CHECK((out.probs.col(0) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("duplicating every pixel leaves eval outputs unchanged") {
  auto p = testing::tiny_params<double>(5);
  randomize_running_stats(p, Domain::source, 6);
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = testing::random_sample(rng, 4, 3, 4);
    const auto a = model::predict<double>(p, s, 0, Domain::source);
    const auto b = model::predict<double>(p, duplicate_pixels(s), 0, Domain::source);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("permuting pixels leaves outputs unchanged") {
  const auto p = testing::tiny_params<double>(8);
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = testing::random_sample(rng, 3, 6, 4);
    const auto a = model::predict<double>(p, s, 3, Domain::target);
    const auto b = model::predict<double>(p, permute_pixels(s, rng), 3, Domain::target);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("shifting through the argument equals shifting the days") {
  const auto p = testing::tiny_params<float>(10);
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = testing::random_sample(rng, 5, 4, 4, 30);
    const int delta = static_cast<int>(rng() % 121) - 60;
    const auto a = model::forward<float>(p, s, delta, Domain::source, Mode::eval);
    const auto b = model::forward<float>(p, data::shift_days(s, delta), 0, Domain::source, Mode::eval);
    CHECK(a.probs == b.probs);
  }
}

TEST_CASE("eval mode uses the requested domain's statistics") {
  auto p = testing::tiny_params<float>(12);
  Rng rng(13);
  const auto s = testing::random_sample(rng, 4, 4, 4);
  const auto before = model::predict<float>(p, s, 0, Domain::target);
  randomize_running_stats(p, Domain::source, 14);
  CHECK(model::predict<float>(p, s, 0, Domain::target) == before);
  CHECK_FALSE(model::predict<float>(p, s, 0, Domain::source) == before);
}

TEST_CASE("predict matches the batched eval forward") {
  const auto p = testing::tiny_params<double>(15);
  Rng rng(16);
  std::vector<data::TimeSeriesSample> batch{testing::random_sample(rng, 3, 2, 4),
                                            testing::random_sample(rng, 6, 5, 4)};
  const std::vector<int> shifts{-7, 9};
  const auto out = model::forward<double>(p, batch, shifts, Domain::source, Mode::eval);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto single = model::predict<double>(p, batch[i], shifts[i], Domain::source);
    CHECK((out.probs.col(static_cast<Eigen::Index>(i)) - single).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("forward errors") {
  const auto p = testing::tiny_params<float>(17);
  Rng rng(18);
  const auto wrong_channels = testing::random_sample(rng, 3, 2, 3);
  CHECK_THROWS_AS(model::forward<float>(p, wrong_channels, 0, Domain::source, Mode::eval), DimensionError);
  const auto s = testing::random_sample(rng, 3, 2, 4);
  CHECK_THROWS_AS(model::forward<float>(p, s, 61, Domain::source, Mode::eval), ShiftRangeError);
  CHECK_THROWS_AS(model::forward<float>(p, s, -61, Domain::source, Mode::eval), ShiftRangeError);
  CHECK_NOTHROW(model::forward<float>(p, s, -60, Domain::source, Mode::eval));
}

TEST_CASE("focal loss values") {
  Eigen::VectorXd p(2);
  p << 1.0, 0.0;
  CHECK(model::focal_loss(p, 0, 1.0) == 0.0);
  CHECK(model::focal_loss(p, 1, 1.0) == doctest::Approx(-std::log(1e-12)));
  p << 0.5, 0.5;
  CHECK(model::focal_loss(p, 0, 1.0) == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-12));
  p << 0.3, 0.7;
  CHECK(model::focal_loss(p, 1, 0.0) == doctest::Approx(-std::log(0.7)).epsilon(1e-12));
}

TEST_CASE("focal loss gradient matches finite differences on the logits") {
  Eigen::MatrixXd logits(3, 2);
  logits << 0.2, -1.0, 1.5, 0.3, -0.4, 2.0;
  auto probs_of = [](const Eigen::MatrixXd& z) {
    Eigen::MatrixXd p(z.rows(), z.cols());
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      const Eigen::VectorXd e = (z.col(j).array() - z.col(j).maxCoeff()).exp();
      p.col(j) = e / e.sum();
    }
    return p;
  };
  const std::vector<int> labels{2, 0};
  const std::vector<double> weights{0.5, 0.25};
  for (double gamma : {0.0, 1.0, 2.0}) {
    const auto g = model::focal_loss_gradient<double>(probs_of(logits), labels, weights, gamma);
    for (Eigen::Index j = 0; j < logits.size(); ++j) {
      auto up = logits, down = logits;
      up.data()[j] += 1e-6;
      down.data()[j] -= 1e-6;
      const double numeric = (model::focal_loss_gradient<double>(probs_of(up), labels, weights, gamma).loss -
                              model::focal_loss_gradient<double>(probs_of(down), labels, weights, gamma).loss) /
                             2e-6;
      CHECK(g.dlogits.data()[j] == doctest::Approx(numeric).epsilon(1e-6));
    }
  }
}

TEST_CASE("zero loss weights give zero gradients") {
  const auto p = testing::tiny_params<double>(19);
  Rng rng(20);
  std::vector<data::TimeSeriesSample> batch{testing::random_sample(rng, 3, 2, 4)};
  const std::vector<int> shifts{0}, labels{1};
  const std::vector<double> weights{0.0};
  const auto fwd = model::forward<double>(p, batch, shifts, Domain::source, Mode::train);
  const auto lg = model::focal_loss_gradient<double>(fwd.probs, labels, weights, 1.0);
  CHECK(lg.loss == 0.0);
  const auto g = model::backward<double>(p, fwd.cache, lg.dlogits);
  g.for_each([](std::string_view, const auto& t) { CHECK(t.isZero(0.0)); });
}

TEST_CASE("mean-reduced gradient of a duplicated batch equals the single batch in eval mode") {
  const auto p = testing::tiny_params<double>(21);
  Rng rng(22);
  const auto s = testing::random_sample(rng, 4, 3, 4);
  auto grad = [&](std::size_t copies) {
    std::vector<data::TimeSeriesSample> batch(copies, s);
    const std::vector<int> shifts(copies, 0), labels(copies, 2);
    const std::vector<double> weights(copies, 1.0 / static_cast<double>(copies));
    const auto fwd = model::forward<double>(p, batch, shifts, Domain::source, Mode::eval);
    const auto lg = model::focal_loss_gradient<double>(fwd.probs, labels, weights, 1.0);
    return model::backward<double>(p, fwd.cache, lg.dlogits);
  };
  const auto one = grad(1), two = grad(2);
  model::zip_weights([](std::string_view, const auto& a, const auto& b) { CHECK((a - b).norm() <= 1e-12 * (1 + a.norm())); },
                     one, two);
}

TEST_CASE("backward requires a matching cache") {
  const auto p = testing::tiny_params<double>(23);
  model::ForwardCache<double> empty;
  CHECK_THROWS_AS(model::backward<double>(p, empty, Eigen::MatrixXd::Zero(3, 1)), InputError);
}

TEST_CASE("backward is deterministic") {
  const auto p = testing::tiny_params<double>(24);
  Rng rng(25);
  std::vector<data::TimeSeriesSample> batch{testing::random_sample(rng, 5, 4, 4),
                                            testing::random_sample(rng, 5, 4, 4)};
  const std::vector<int> shifts{0, 0};
  const auto fwd = model::forward<double>(p, batch, shifts, Domain::source, Mode::train);
  const Eigen::MatrixXd d = Eigen::MatrixXd::Ones(3, 2);
  const auto a = model::backward<double>(p, fwd.cache, d);
  const auto b = model::backward<double>(p, fwd.cache, d);
  model::zip_weights([](std::string_view, const auto& x, const auto& y) { CHECK(x == y); }, a, b);
}

TEST_CASE("analytic gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = testing::tiny_params<float>(seed).cast<double>();
    Rng rng(seed + 100);
    std::vector<data::TimeSeriesSample> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(testing::random_sample(rng, 5, 4, 4));
    const std::vector<int> shifts{0, 7, -12}, labels{0, 1, 2};
    for (Mode mode : {Mode::train, Mode::eval}) {
      std::string worst;
      const double err = testing::gradient_check(p, batch, shifts, labels, Domain::source, mode, 1e-4, &worst);
      INFO("seed " << seed << " worst tensor " << worst);
      CHECK(err < 1e-3);
    }
  }
}

TEST_CASE("running statistics update only in train mode") {
  auto p = testing::tiny_params<float>(26);
  Rng rng(27);
  const auto s = testing::random_sample(rng, 4, 6, 4);
  const auto eval = model::forward<float>(p, s, 0, Domain::target, Mode::eval);
  const auto before = p.norm_for(Domain::target).bn1_mean;
  model::update_running_stats(p, eval.cache, 0.9);
  CHECK(p.norm_for(Domain::target).bn1_mean == before);

  const auto train = model::forward<float>(p, s, 0, Domain::target, Mode::train);
  model::update_running_stats(p, train.cache, 0.9);
  const Eigen::VectorXf expected = 0.9f * before + 0.1f * train.cache.bn1.batch_mean;
  CHECK((p.norm_for(Domain::target).bn1_mean - expected).cwiseAbs().maxCoeff() < 1e-7);
  CHECK(p.norm_for(Domain::source).bn1_mean == before);
}

TEST_CASE("init is seeded") {
  const auto a = testing::tiny_params<float>(30);
  const auto b = testing::tiny_params<float>(30);
  const auto c = testing::tiny_params<float>(31);
  CHECK(a.weights.pse1_w == b.weights.pse1_w);
  CHECK(a.weights.query == b.weights.query);
  CHECK_FALSE(a.weights.pse1_w == c.weights.pse1_w);
  CHECK(a.norm[0].bn1_var == Eigen::VectorXf::Ones(8));
}
