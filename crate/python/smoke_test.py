"""Smoke test for the aacord Python bindings.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`.
"""

import math

import aacord_py as aa


def close(a, b, tol):
    return abs(a - b) <= tol * (1.0 + abs(b))


def main():
    assert "harmonic1d" in aa.catalog()

    e = aa.Expression("q1^2*p1 + sin(q1)")
    d = e.differentiate("q1")
    assert close(d.eval({"q1": 0.5, "p1": 2.0}), 2 * 0.5 * 2.0 + math.cos(0.5), 1e-14)
    b = aa.poisson_bracket("q1*p2 - q2*p1", "q2*p3 - q3*p2", 3)
    assert close(b.eval({"q1": 0.3, "q3": -1.2, "p1": 0.4, "p3": 0.7}), (-1.2) * 0.4 - 0.3 * 0.7, 1e-14)

    z = aa.hamiltonian_flow("(p1^2 + q1^2)/2", [1.0, 0.0], math.pi / 2)
    assert close(z[0], 0.0, 1e-9) and close(z[1], -1.0, 1e-9), z

    sys = aa.load_catalog("harmonic1d")
    assert (sys.n, sys.k, sys.m) == (1, 1, 1)
    cert = sys.certify()
    assert cert["passed"], cert

    topo = sys.topology(point=[0.0, 1.5])
    assert close(topo["lattice"]["basis"][0][0], 2 * math.pi, 1e-8)

    chart = sys.chart()
    assert chart.rank == 1
    actions, x, t, phi = chart.forward([0.6, -0.8])
    assert close(actions[0], 0.5, 1e-8), actions
    back = chart.inverse(actions, x, t, phi)
    assert all(close(u, v, 1e-8) for u, v in zip(back, [0.6, -0.8])), back
    assert close(chart.actions([1.2])[0], 1.2, 1e-8)
    assert close(chart.frequency_matrix([1.0])[0][0], 1.0, 1e-6)

    header, rows = chart.trace(t_max=1.0, dt=0.5)
    assert header == ["t", "q1", "p1", "I1", "phi1"] and len(rows) == 3

    report = aa.load_catalog("oscillator2d").verify(t_max=6.0)
    assert report["passed"], report

    try:
        aa.parse_spec('[system]\nname = "bad"\nn = 1\n[integrals]\nA = "q1"\nB = "p1"\n')
    except ValueError:
        pass
    else:
        raise AssertionError("k = 2n must be rejected")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
