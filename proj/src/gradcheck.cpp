#include "gistlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "gistlab/ops.hpp"
#include "gistlab/rng.hpp"

namespace gistlab {

GradCheckResult finite_diff_check(const LossFn& f, Tensor<double>& x, double h) {
  if (!x.requires_grad()) throw TapeError("finite_diff_check: tensor does not require a gradient");
  x.release_grad();
  {
    Tape<double> tape;
    auto loss = f(tape);
    tape.backward(loss);
  }
  const std::vector<double> analytic = x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                                    : std::vector<double>(x.size(), 0.0);
  x.release_grad();

  auto evaluate = [&] {
    Tape<double> tape(Tape<double>::Mode::Inference);
    return f(tape).item();
  };

  GradCheckResult result;
  auto values = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    auto at = [&](double offset) {
      values[i] = saved + offset;
      return evaluate();
    };
    const double up2 = at(2.0 * h), up = at(h), down = at(-h), down2 = at(-2.0 * h);
    values[i] = saved;
    const double numeric = (-up2 + 8.0 * up - 8.0 * down + down2) / (12.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), kGradCheckFloor});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (i == 0 || rel > result.max_rel_error) {
      result = {rel, i, analytic[i], numeric};
    }
  }
  return result;
}

GradCheckResult finite_diff_check(const LossFn& f, std::vector<Tensor<double>>& xs, double h) {
  GradCheckResult worst;
  for (auto& x : xs) {
    auto r = finite_diff_check(f, x, h);
    if (r.max_rel_error >= worst.max_rel_error) worst = r;
  }
  return worst;
}

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const Entry& e) { return e.passed; });
}

std::string GradCheckReport::to_string() const {
  std::ostringstream out;
  for (const auto& e : entries) {
    out << (e.passed ? "PASS " : "FAIL ") << std::left << std::setw(34) << e.name << " max_rel_error="
        << std::scientific << std::setprecision(3) << e.max_rel_error << '\n';
  }
  out << (passed() ? "all " : "some ") << "checks " << (passed() ? "passed" : "FAILED") << " (threshold "
      << std::scientific << std::setprecision(1) << threshold << ")\n";
  return out.str();
}

GradCheckReport run_gradcheck(const std::vector<GradCheckCase>& cases, double threshold) {
  GradCheckReport report;
  report.threshold = threshold;
  for (const auto& c : cases) {
    double err;
    try {
      err = c.run();
    } catch (const std::exception&) {
      err = INFINITY;
    }
    report.entries.push_back({c.name, err, err < threshold});
  }
  return report;
}

namespace {

using T = double;
using Tn = Tensor<double>;

Tn random_tensor(Rng& rng, Shape shape, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return Tn::from(std::move(shape), std::move(v), requires_grad);
}

// sum(y (.) w) with a fixed random w, so no coordinate has a structurally zero
// gradient.
Tn weighted(Tape<T>& tape, const Tn& y, const Tn& w) { return ops::sum(tape, ops::mul(tape, y, w)); }

GradCheckCase make_case(std::string name, std::vector<Tn> inputs, std::function<Tn(Tape<T>&)> f, double h) {
  return {std::move(name), [inputs, f, h]() mutable { return finite_diff_check(f, inputs, h).max_rel_error; }};
}

}  // namespace

std::vector<GradCheckCase> primitive_gradcheck_cases(unsigned seed, double h) {
  Rng rng(derive_seed(seed, 0xC4EC));
  std::vector<GradCheckCase> cases;

  {
    auto a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4}), w = random_tensor(rng, {3, 4}, false);
    cases.push_back(make_case("add", {a, b}, [=](Tape<T>& t) { return weighted(t, ops::add(t, a, b), w); }, h));
    cases.push_back(make_case("sub", {a, b}, [=](Tape<T>& t) { return weighted(t, ops::sub(t, a, b), w); }, h));
    cases.push_back(make_case("mul", {a, b}, [=](Tape<T>& t) { return weighted(t, ops::mul(t, a, b), w); }, h));
    cases.push_back(make_case("scale", {a}, [=](Tape<T>& t) { return weighted(t, ops::scale(t, a, -1.7), w); }, h));
    cases.push_back(make_case("sum", {a}, [=](Tape<T>& t) { return ops::sum(t, ops::mul(t, a, a)); }, h));
    cases.push_back(make_case("mean", {a}, [=](Tape<T>& t) { return ops::mean(t, ops::mul(t, a, w)); }, h));
    auto w2 = random_tensor(rng, {2, 6}, false);
    cases.push_back(
        make_case("reshape", {a}, [=](Tape<T>& t) { return weighted(t, ops::reshape(t, a, {2, 6}), w2); }, h));
  }
  {
    auto x = random_tensor(rng, {2, 3, 4}), b = random_tensor(rng, {4}), w = random_tensor(rng, {2, 3, 4}, false);
    cases.push_back(
        make_case("add_bias", {x, b}, [=](Tape<T>& t) { return weighted(t, ops::add_bias(t, x, b), w); }, h));
  }
  {
    auto a = random_tensor(rng, {4, 5}), b = random_tensor(rng, {5, 3}), w = random_tensor(rng, {4, 3}, false);
    cases.push_back(make_case("matmul", {a, b}, [=](Tape<T>& t) { return weighted(t, ops::matmul(t, a, b), w); }, h));
  }
  {
    auto x = random_tensor(rng, {2, 3, 4}), wt = random_tensor(rng, {4, 5}), b = random_tensor(rng, {5});
    auto w = random_tensor(rng, {2, 3, 5}, false);
    cases.push_back(
        make_case("linear", {x, wt, b}, [=](Tape<T>& t) { return weighted(t, ops::linear(t, x, wt, b), w); }, h));
  }
  {
    auto a = random_tensor(rng, {2, 3, 4}), b = random_tensor(rng, {2, 4, 5}), bt = random_tensor(rng, {2, 5, 4});
    auto w = random_tensor(rng, {2, 3, 5}, false);
    cases.push_back(make_case("batched_matmul", {a, b},
                              [=](Tape<T>& t) { return weighted(t, ops::batched_matmul(t, a, b, false), w); }, h));
    cases.push_back(make_case("batched_matmul_transposed", {a, bt},
                              [=](Tape<T>& t) { return weighted(t, ops::batched_matmul(t, a, bt, true), w); }, h));
  }
  {
    auto x = random_tensor(rng, {2, 3, 6}), w = random_tensor(rng, {4, 3, 3}, false);
    auto y = random_tensor(rng, {4, 3, 3}), wy = random_tensor(rng, {2, 3, 6}, false);
    cases.push_back(
        make_case("split_heads", {x}, [=](Tape<T>& t) { return weighted(t, ops::split_heads(t, x, 2), w); }, h));
    cases.push_back(
        make_case("merge_heads", {y}, [=](Tape<T>& t) { return weighted(t, ops::merge_heads(t, y, 2), wy); }, h));
  }
  {
    auto z = random_tensor(rng, {3, 5}), w = random_tensor(rng, {3, 5}, false);
    cases.push_back(
        make_case("softmax_t(T=1)", {z}, [=](Tape<T>& t) { return weighted(t, ops::softmax_t(t, z, 1.0), w); }, h));
    cases.push_back(
        make_case("softmax_t(T=3)", {z}, [=](Tape<T>& t) { return weighted(t, ops::softmax_t(t, z, 3.0), w); }, h));
  }
  {
    auto x = random_tensor(rng, {3, 6}), g = random_tensor(rng, {6}), b = random_tensor(rng, {6});
    auto w = random_tensor(rng, {3, 6}, false);
    cases.push_back(make_case("layer_norm", {x, g, b},
                              [=](Tape<T>& t) { return weighted(t, ops::layer_norm(t, x, g, b, 1e-6), w); }, h));
  }
  {
    auto x = random_tensor(rng, {4, 5}, true, 1.5), w = random_tensor(rng, {4, 5}, false);
    cases.push_back(make_case("gelu", {x}, [=](Tape<T>& t) { return weighted(t, ops::gelu(t, x), w); }, h));
  }
  {
    auto x = random_tensor(rng, {2, 3, 4}), g = random_tensor(rng, {4}), b = random_tensor(rng, {4});
    auto w = random_tensor(rng, {2, 3, 4}, false);
    cases.push_back(make_case("scale_shift", {x, g, b},
                              [=](Tape<T>& t) { return weighted(t, ops::scale_shift(t, x, g, b), w); }, h));
  }
  {
    auto z = random_tensor(rng, {4, 5});
    std::vector<int> labels{0, 3, 4, 1};
    cases.push_back(make_case("cross_entropy", {z}, [=](Tape<T>& t) { return ops::cross_entropy<T>(t, z, labels); }, h));
  }
  {
    auto p = random_tensor(rng, {3, 5}), q = random_tensor(rng, {3, 5});
    cases.push_back(
        make_case("kl_divergence(T=1)", {p, q}, [=](Tape<T>& t) { return ops::kl_divergence(t, p, q, 1.0); }, h));
    cases.push_back(
        make_case("kl_divergence(T=3)", {p, q}, [=](Tape<T>& t) { return ops::kl_divergence(t, p, q, 3.0); }, h));
    cases.push_back(make_case("mse", {p, q}, [=](Tape<T>& t) { return ops::mse(t, p, q); }, h));
    cases.push_back(make_case("cosine_distance", {p, q}, [=](Tape<T>& t) { return ops::cosine_distance(t, p, q); }, h));
  }
  {
    auto a = random_tensor(rng, {2, 2, 3}), b = random_tensor(rng, {2, 1, 3}), w = random_tensor(rng, {2, 3, 3}, false);
    cases.push_back(make_case("concat_tokens", {a, b},
                              [=](Tape<T>& t) { return weighted(t, ops::concat_tokens<T>(t, {a, b}), w); }, h));
    auto p = random_tensor(rng, {3, 3}), wb = random_tensor(rng, {2, 3, 3}, false);
    cases.push_back(make_case("broadcast_batch", {p},
                              [=](Tape<T>& t) { return weighted(t, ops::broadcast_batch(t, p, 2), wb); }, h));
    auto x = random_tensor(rng, {2, 4, 3}), ws = random_tensor(rng, {2, 2, 3}, false), wm = random_tensor(rng, {2, 3}, false);
    cases.push_back(make_case("slice_tokens", {x},
                              [=](Tape<T>& t) { return weighted(t, ops::slice_tokens(t, x, 1, 2), ws); }, h));
    cases.push_back(
        make_case("mean_tokens", {x}, [=](Tape<T>& t) { return weighted(t, ops::mean_tokens(t, x), wm); }, h));
  }
  {
    auto img = random_tensor(rng, {2, 2, 4, 4}), w = random_tensor(rng, {2, 4, 8}, false);
    cases.push_back(
        make_case("patchify", {img}, [=](Tape<T>& t) { return weighted(t, ops::patchify(t, img, 2), w); }, h));
  }
  return cases;
}

}  // namespace gistlab
