#include "rpm_align/nn/gradcheck.hpp"

#include "rpm_align/errors.hpp"
#include "rpm_align/random.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

namespace rpm_align::nn {

namespace {

double evaluate(const ScalarGraph& graph, const ParamBundle& point) {
  Tape tape;
  tape.set_grad_enabled(false);
  const double v = graph(tape, bind(tape, point)).value().item();
  if (!std::isfinite(v)) throw Error("grad_check: non-finite function value");
  return v;
}

}  // namespace

GradCheckReport grad_check(const ScalarGraph& graph, const ParamBundle& point,
                           const GradCheckOptions& options) {
  ParamBundle analytic;
  {
    Tape tape;
    const BoundParams bound = bind(tape, point);
    const Var out = graph(tape, bound);
    if (!std::isfinite(out.value().item())) throw Error("grad_check: non-finite function value");
    tape.backward(out);
    analytic = collect_grads(bound, point);
  }

  std::vector<std::pair<std::string, std::size_t>> entries;
  for (const auto& [name, t] : point.tensors) {
    for (std::size_t i = 0; i < t.size(); ++i) entries.emplace_back(name, i);
  }
  if (options.max_entries > 0 && entries.size() > options.max_entries) {
    Rng rng(options.seed);
    rng.shuffle(entries.begin(), entries.end());
    entries.resize(options.max_entries);
    std::sort(entries.begin(), entries.end());
  }

  const double f0 = evaluate(graph, point);
  GradCheckReport report;
  ParamBundle probe = point;
  for (const auto& [name, i] : entries) {
    double& slot = probe.at(name)[i];
    const double orig = slot;
    GradCheckEntry e;
    e.name = name;
    e.index = i;
    e.analytic = analytic.at(name)[i];
    auto relative = [&](double numeric) {
      return std::abs(e.analytic - numeric) /
             std::max({std::abs(e.analytic), std::abs(numeric), options.denominator_floor});
    };

    for (double h = options.step;; h /= 10.0) {
      slot = orig + h;
      const double fp = evaluate(graph, probe);
      slot = orig - h;
      const double fm = evaluate(graph, probe);
      slot = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = relative(numeric);
      if (h == options.step || err < e.rel_error) {
        e.refined = h != options.step;
        e.numeric = numeric;
        e.step = h;
        e.rel_error = err;
      }
      if (err <= options.refine_above || h / 10.0 < 0.5 * options.min_step) break;
      // A kink inside [x - h, x + h] shows up as one one-sided difference
      // agreeing with the analytic value far better than the other; smooth
      // curvature moves both by the same amount in opposite directions.
      // Smaller steps trade truncation for round-off, so the best step wins.
      const double ef = std::abs((fp - f0) / h - e.analytic), eb = std::abs((f0 - fm) / h - e.analytic);
      if (std::min(ef, eb) * 10.0 > std::max(ef, eb)) break;
    }
    if (e.refined) ++report.refined;
    ++report.checked;
    if (report.checked == 1 || e.rel_error > report.max_rel_error) {
      report.max_rel_error = e.rel_error;
      report.worst = e;
    }
  }
  return report;
}

}  // namespace rpm_align::nn
