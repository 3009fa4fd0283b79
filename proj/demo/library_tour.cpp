// Small tour of the header-only library: simulate, integrate, solve.
#include <iostream>

#include "pathreg/bsde.hpp"

using namespace pathreg;

int main() {
  const double T = 1.0;
  const TimeGrid grid{T, 4096};
  const auto X = simulate({BrownianMotion{}}, grid, 1, 500);

  const auto sched = EpsSchedule::for_grid(grid.step(), T);
  const auto q = quadratic_variation_sp(X, sched);
  std::vector<double> qT;
  for (const auto& b : q.bracket) qT.push_back(b[grid.n_steps]);
  std::cout << "median [W]_T            " << stats::median(qT) << "\n";

  const auto eta = GridPath::sample(-T, 0.0, 64, [](double x) { return 0.8 + 0.3 * x; });
  const FlowSpec spec{0.0, eta, 7, 20000};
  const auto mc = solve_linear_mc(present_square(T), {}, spec);
  std::cout << "E[W_T^2 | eta]          " << mc.value << " +- " << mc.std_error << "  (exact "
            << 0.8 * 0.8 + T << ")\n";

  const auto sol = solve_bsde(present_square(T), linear_driver(0.5), spec);
  std::cout << "BSDE Y_0, F = y/2       " << sol.y0.value << " +- " << sol.y0.std_error << "  (exact "
            << std::exp(0.5 * T) * (0.8 * 0.8 + T) << ")\n";

  const auto r = robust_representation(present_square(T), zero_driver(), present_square(T, true), X, sched);
  std::cout << "robust representation   median relative error " << r.median_error << "\n";
}
