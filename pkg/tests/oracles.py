"""Independent reference computations for the frozen constants in the tests.

Everything here uses ``decimal`` at 50 digits and never touches numpy or the
package, so a bug in the library cannot leak into its own expected values.
Run ``python tests/oracles.py`` to print the table the tests freeze.
"""

from __future__ import annotations

from decimal import Decimal as D, getcontext

getcontext().prec = 50

PI = D("3.14159265358979323846264338327950288419716939937510")


def ln(x: D) -> D:
    return D(x).ln()


def softplus(x: D) -> D:
    return (1 + D(x).exp()).ln()


def zscores(values: list[D]) -> list[D]:
    """Population-std z-scores."""
    n = D(len(values))
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n
    std = var.sqrt()
    return [(v - mean) / std for v in values]


def gaussian_kl_equal_var(gap: D, var: D) -> D:
    """KL between two isotropic Gaussians sharing variance ``var``."""
    return gap * gap / (2 * var)


def logpdf_at_mean(dim: int, std: D) -> D:
    return -D(dim) * ln(std) - D(dim) / 2 * ln(2 * PI)


def em_mean(x: D, v: D, t: D, sigma: D, dt: D) -> D:
    drift = v + sigma * sigma / (2 * t) * (x + (1 - t) * v)
    return x + drift * dt


def linear_gaussian_variance(steps: int, a: D, t_min: D, cap_second_point: bool = True) -> D:
    """Exact terminal variance of the Euler-Maruyama chain for 1-D standard
    normal data with the closed-form velocity ``v = x (2t-1) / ((1-t)^2 + t^2)``."""
    grid = [1 - t_min - (1 - 2 * t_min) * D(j) / D(steps) for j in range(steps + 1)]
    hi = grid[1] if cap_second_point else 1 - t_min
    var = D(1)
    for j in range(steps):
        t, dt = grid[j], grid[j + 1] - grid[j]
        tc = min(max(t, t_min), hi)
        sigma2 = a * a * tc / (1 - tc)
        c = (2 * t - 1) / ((1 - t) ** 2 + t**2)
        gain = 1 + (c + sigma2 / (2 * t) * (1 + (1 - t) * c)) * dt
        var = gain * gain * var + sigma2 * abs(dt)
    return var


TABLE = {
    "ln2": ln(D(2)),
    "neg_log_sigmoid_1": softplus(D(-1)),
    "z_123": zscores([D(1), D(2), D(3)])[2],
    "kl_gap01_var025": gaussian_kl_equal_var(D("0.1"), D("0.25")),
    "logpdf_mean_d1_std1": logpdf_at_mean(1, D(1)),
    "em_mean_example": em_mean(D(1), D(0), D("0.5"), D(1), D("-0.1")),
    "softplus0_plus_floor": softplus(D(0)) + D("1e-4"),
    "linear_gaussian_var_T100": linear_gaussian_variance(100, D("0.7"), D("0.001")),
    "linear_gaussian_var_T6_capped": linear_gaussian_variance(6, D("0.7"), D("0.001")),
    "linear_gaussian_var_T6_literal": linear_gaussian_variance(6, D("0.7"), D("0.001"), False),
}


if __name__ == "__main__":
    for name, value in TABLE.items():
        print(f"{name:34s} {value:.17g}")
