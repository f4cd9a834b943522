#include "sinkdoor/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>

#include "sinkdoor/errors.hpp"

namespace sinkdoor {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(shape_numel(shape));
  for (double& x : data) x = lo + (hi - lo) * rng.uniform();
  return Tensor(std::move(shape), std::move(data), true);
}

// Weighted scalar reduction of f's output.
double forward_value(const GradFn& f, const std::vector<Tensor>& inputs, const std::vector<double>& w) {
  NoGradScope no_grad;
  Tensor out = f(inputs);
  double s = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) s += out.at(i) * w[i];
  return s;
}

std::size_t dim_in(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

}  // namespace

double gradcheck(const GradFn& f, const std::vector<Tensor>& inputs, Rng& rng, double h) {
  std::vector<double> w;
  {
    NoGradScope no_grad;
    const Tensor probe = f(inputs);
    w.resize(probe.numel());
  }
  for (double& x : w) x = rng.uniform() * 2.0 - 1.0;

  for (const Tensor& t : inputs) t.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor out = f(inputs);
    const Tensor weights(out.shape(), w);
    tape.backward(sum(mul(out, weights)));
  }

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (const Tensor& t : inputs) {
    if (!t.requires_grad()) continue;
    const auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = forward_value(f, inputs, w);
      data[i] = saved - h;
      const double down = forward_value(f, inputs, w);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
  }
  return std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), 1e-12);
}

namespace {

struct Case {
  // Draws inputs and the function for one trial.
  std::function<std::pair<GradFn, std::vector<Tensor>>(Rng&)> make;
};

std::map<std::string, Case> cases() {
  std::map<std::string, Case> c;
  auto unary = [](Tensor (*op)(const Tensor&), double lo, double hi) {
    return Case{[=](Rng& rng) {
      const std::size_t m = dim_in(rng, 1, 4), n = dim_in(rng, 1, 5);
      GradFn f = [op](const std::vector<Tensor>& x) { return op(x[0]); };
      return std::pair{f, std::vector<Tensor>{random_tensor({m, n}, rng, lo, hi)}};
    }};
  };
  auto binary = [](Tensor (*op)(const Tensor&, const Tensor&)) {
    return Case{[=](Rng& rng) {
      const std::size_t m = dim_in(rng, 1, 4), n = dim_in(rng, 1, 5);
      GradFn f = [op](const std::vector<Tensor>& x) { return op(x[0], x[1]); };
      return std::pair{f, std::vector<Tensor>{random_tensor({m, n}, rng), random_tensor({m, n}, rng)}};
    }};
  };
  c["add"] = binary(add);
  c["sub"] = binary(sub);
  c["mul"] = binary(mul);
  c["exp"] = unary(exp, -2.0, 2.0);
  c["log"] = unary(log, 0.2, 3.0);
  c["softplus"] = unary(softplus, -4.0, 4.0);
  c["square"] = unary(square, -2.0, 2.0);
  c["gelu"] = unary(gelu, -3.0, 3.0);
  c["transpose"] = unary(transpose, -1.0, 1.0);
  c["softmax_rows"] = unary(softmax_rows, -3.0, 3.0);
  c["log_softmax_rows"] = unary(log_softmax_rows, -3.0, 3.0);
  c["sum_rows"] = unary(sum_rows, -1.0, 1.0);
  c["sum"] = unary(sum, -1.0, 1.0);
  c["mean"] = unary(mean, -1.0, 1.0);
  c["matmul"] = {[](Rng& rng) {
    const std::size_t m = dim_in(rng, 1, 4), k = dim_in(rng, 1, 5), n = dim_in(rng, 1, 4);
    GradFn f = [](const std::vector<Tensor>& x) { return matmul(x[0], x[1]); };
    return std::pair{f, std::vector<Tensor>{random_tensor({m, k}, rng), random_tensor({k, n}, rng)}};
  }};
  c["scale"] = {[](Rng& rng) {
    const double s = rng.uniform() * 4.0 - 2.0;
    GradFn f = [s](const std::vector<Tensor>& x) { return scale(x[0], s); };
    return std::pair{f, std::vector<Tensor>{random_tensor({dim_in(rng, 1, 4), dim_in(rng, 1, 4)}, rng)}};
  }};
  c["reshape"] = {[](Rng& rng) {
    const std::size_t m = dim_in(rng, 1, 4), n = dim_in(rng, 1, 4);
    GradFn f = [m, n](const std::vector<Tensor>& x) { return reshape(x[0], {n, m}); };
    return std::pair{f, std::vector<Tensor>{random_tensor({m, n}, rng)}};
  }};
  c["add_row_broadcast"] = {[](Rng& rng) {
    const std::size_t m = dim_in(rng, 1, 4), n = dim_in(rng, 1, 5);
    GradFn f = [](const std::vector<Tensor>& x) { return add_row_broadcast(x[0], x[1]); };
    return std::pair{f, std::vector<Tensor>{random_tensor({m, n}, rng), random_tensor({n}, rng)}};
  }};
  c["segment_sum"] = {[](Rng& rng) {
    std::vector<Segment> segs;
    std::size_t n = 0;
    for (std::size_t s = 0, count = dim_in(rng, 1, 3); s < count; ++s) {
      const std::size_t len = dim_in(rng, 1, 4);
      segs.push_back({n, len});
      n += len;
    }
    GradFn f = [segs](const std::vector<Tensor>& x) { return segment_sum(x[0], segs); };
    return std::pair{f, std::vector<Tensor>{random_tensor({n}, rng)}};
  }};
  c["layer_norm"] = {[](Rng& rng) {
    const std::size_t m = dim_in(rng, 1, 3), n = dim_in(rng, 2, 6);
    GradFn f = [](const std::vector<Tensor>& x) { return layer_norm(x[0], x[1], x[2]); };
    return std::pair{f, std::vector<Tensor>{random_tensor({m, n}, rng, -2.0, 2.0), random_tensor({n}, rng, 0.5, 1.5),
                                            random_tensor({n}, rng)}};
  }};
  c["embedding"] = {[](Rng& rng) {
    const std::size_t v = dim_in(rng, 2, 6), d = dim_in(rng, 1, 4);
    std::vector<std::size_t> ids(dim_in(rng, 1, 6));
    for (auto& id : ids) id = static_cast<std::size_t>(rng.below(v));
    GradFn f = [ids](const std::vector<Tensor>& x) { return embedding(x[0], ids); };
    return std::pair{f, std::vector<Tensor>{random_tensor({v, d}, rng)}};
  }};
  c["gather_rows"] = {[](Rng& rng) {
    const std::size_t m = dim_in(rng, 1, 5), n = dim_in(rng, 1, 4);
    std::vector<std::size_t> rows(dim_in(rng, 1, 6));
    for (auto& r : rows) r = static_cast<std::size_t>(rng.below(m));
    GradFn f = [rows](const std::vector<Tensor>& x) { return gather_rows(x[0], rows); };
    return std::pair{f, std::vector<Tensor>{random_tensor({m, n}, rng)}};
  }};
  c["pick_per_row"] = {[](Rng& rng) {
    const std::size_t m = dim_in(rng, 1, 5), n = dim_in(rng, 1, 5);
    std::vector<std::size_t> cols(m);
    for (auto& col : cols) col = static_cast<std::size_t>(rng.below(n));
    GradFn f = [cols](const std::vector<Tensor>& x) { return pick_per_row(x[0], cols); };
    return std::pair{f, std::vector<Tensor>{random_tensor({m, n}, rng)}};
  }};
  c["cross_entropy"] = {[](Rng& rng) {
    const std::size_t m = dim_in(rng, 1, 5), n = dim_in(rng, 2, 6);
    std::vector<std::size_t> targets(m);
    for (auto& t : targets) t = static_cast<std::size_t>(rng.below(n));
    auto mask = std::make_shared<std::vector<char>>(m, 1);
    for (auto& b : *mask) b = rng.below(4) != 0;
    (*mask)[static_cast<std::size_t>(rng.below(m))] = 1;
    GradFn f = [targets, mask](const std::vector<Tensor>& x) {
      std::unique_ptr<bool[]> bits(new bool[mask->size()]);
      for (std::size_t i = 0; i < mask->size(); ++i) bits[i] = (*mask)[i] != 0;
      return cross_entropy(x[0], targets, std::span<const bool>(bits.get(), mask->size()));
    };
    return std::pair{f, std::vector<Tensor>{random_tensor({m, n}, rng, -3.0, 3.0)}};
  }};
  c["causal_attention"] = {[](Rng& rng) {
    const std::size_t heads = dim_in(rng, 1, 3), dh = dim_in(rng, 1, 3);
    std::vector<Segment> segs;
    std::size_t n = 0;
    for (std::size_t s = 0, count = dim_in(rng, 1, 2); s < count; ++s) {
      const std::size_t len = dim_in(rng, 1, 4);
      segs.push_back({n, len});
      n += len;
    }
    GradFn f = [segs, heads](const std::vector<Tensor>& x) { return causal_attention(x[0], x[1], x[2], segs, heads); };
    const Shape s{n, heads * dh};
    return std::pair{f, std::vector<Tensor>{random_tensor(s, rng), random_tensor(s, rng), random_tensor(s, rng)}};
  }};
  c["head_norms"] = {[](Rng& rng) {
    const std::size_t heads = dim_in(rng, 1, 3), dh = dim_in(rng, 1, 3), m = dim_in(rng, 1, 5);
    std::vector<std::size_t> rows(dim_in(rng, 1, 4));
    for (auto& r : rows) r = static_cast<std::size_t>(rng.below(m));
    GradFn f = [rows, heads](const std::vector<Tensor>& x) { return head_norms(x[0], rows, heads); };
    return std::pair{f, std::vector<Tensor>{random_tensor({m, heads * dh}, rng, 0.2, 1.0)}};
  }};
  return c;
}

}  // namespace

std::vector<std::string> gradcheck_ops() {
  std::vector<std::string> out;
  for (const auto& [name, _] : cases()) out.push_back(name);
  return out;
}

std::vector<OpCheck> run_gradchecks(std::uint64_t seed, int trials) {
  if (trials < 1) throw ConfigError("run_gradchecks: trials must be >= 1");
  std::vector<OpCheck> out;
  std::uint64_t salt = 0;
  for (const auto& [name, c] : cases()) {
    Rng rng = Rng(seed).fork(++salt);
    OpCheck check{name, trials, 0.0};
    for (int t = 0; t < trials; ++t) {
      auto [f, inputs] = c.make(rng);
      check.max_rel_error = std::max(check.max_rel_error, gradcheck(f, inputs, rng));
    }
    out.push_back(check);
  }
  return out;
}

double softmax_row_sum_error(std::uint64_t seed, int trials) {
  Rng rng(seed);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t m = dim_in(rng, 1, 8), n = dim_in(rng, 1, 64);
    const double spread = t % 2 == 0 ? 5.0 : 500.0;
    Tensor x = random_tensor({m, n}, rng, -spread, spread);
    const Tensor p = softmax_rows(x.detach());
    for (std::size_t r = 0; r < m; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += p.at(r, j);
      worst = std::max(worst, std::abs(s - 1.0));
    }
  }
  return worst;
}

}  // namespace sinkdoor
