import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from oscidal.errors import CorruptCheckpoint, InvalidConfig, NoneSolution
from oscidal.problem import (
    ComplexGridFunction,
    ExactSolutionSpec,
    KernelSpec,
    ProblemSpec,
    _cache_path,
    cache_dir,
    compute_rhs,
    eval_exact,
    exact_values,
    read_rhs_cache,
    write_rhs_cache,
)


def one_band(freq=0.0):
    return ExactSolutionSpec.frequency_bands([("one", freq)])


# --- exact solutions --------------------------------------------------------


def test_example2_zero_at_origin():
    spec = ExactSolutionSpec.example2(1.0)
    g = eval_exact(spec, np.array([-0.5, 0.0, 0.5]))
    assert g.values[1] == 0j


def test_constant_band_is_one():
    g = eval_exact(one_band(), np.linspace(-1, 1, 7))
    assert np.array_equal(g.values, np.ones(7, dtype=complex))


def test_example1_at_origin_by_hand():
    # e^0 + (sin0+0+1) + (cos0+0) + |0| + 0 + cosh0 + 0 + sinh0 + (0+sin0) + 0
    hand = 1.0 + 1.0 + 1.0 + 0.0 + 0.0 + 1.0 + 0.0 + 0.0 + 0.0 + 0.0
    v = exact_values(ExactSolutionSpec.example1(), np.array([0.0]))[0]
    assert v == complex(hand, 0.0)


def test_example1_frequencies_at_kappa_500():
    s = np.array([0.3])
    p = ProblemSpec(KernelSpec.cosine_product(), 500, ExactSolutionSpec.example1())
    hand = (np.exp(0.3) + (math.sin(0.3) + 0.3 + 1) * np.exp(100j * 0.3)
            + (math.cos(0.3) + 0.027) * np.exp(-150j * 0.3) + 0.3 * np.exp(-200j * 0.3)
            + 0.027 * np.exp(250j * 0.3) + math.cosh(0.3) * np.exp(300j * 0.3)
            + 0.09 * np.exp(-350j * 0.3) + math.sinh(0.3) * np.exp(400j * 0.3)
            + (0.027 + math.sin(0.3)) * np.exp(450j * 0.3) + 0.027 * np.exp(-500j * 0.3))
    assert abs(exact_values(p.exact, s)[0] - hand) < 1e-12


def test_example2_envelope_by_hand():
    s = -0.4
    spec = ExactSolutionSpec.example2(0.6, top_frequency=500)
    bands = (math.sin(0.4) + (-0.064) * np.exp(100j * s) + math.cosh(s) * np.exp(300j * s)
             + 0.16 * np.exp(-350j * s) + math.sinh(s) * np.exp(400j * s)
             + (-0.064 + math.sin(s)) * np.exp(450j * s) + 0.064 * np.exp(-500j * s))
    env = -1.0 * 0.4**0.6 * math.log(0.4)
    assert abs(exact_values(spec, np.array([s]))[0] - env * bands) < 1e-12


def test_examples_rescale_to_problem_wavenumber():
    p = ProblemSpec(KernelSpec.constant(0.45), 50, ExactSolutionSpec.example2(1.0))
    assert p.exact.top_frequency == 50.0
    assert p.exact.max_frequency == pytest.approx(50.0)
    p500 = ProblemSpec(KernelSpec.constant(0.45), 500, ExactSolutionSpec.example2(1.0))
    assert [w for _, w in p500.exact.resolved_bands] == [0, 100, 300, -350, 400, 450, -500]


@pytest.mark.parametrize("eps", [1.0, 0.8, 0.6, 0.4, 0.2, 0.1])
def test_example2_continuous_at_origin(eps):
    spec = ExactSolutionSpec.example2(eps, top_frequency=500)
    s = 10.0 ** -np.arange(2, 300, 20.0)
    mags = np.abs(exact_values(spec, s))
    assert np.all(np.diff(mags) < 0)
    assert mags[-1] < 1e-3


def test_none_solution_raises():
    with pytest.raises(NoneSolution):
        eval_exact(ExactSolutionSpec.none(), np.array([0.0, 1.0]))


def test_invalid_specs():
    with pytest.raises(InvalidConfig):
        ProblemSpec(KernelSpec.constant(1.0), 0.5, one_band())
    with pytest.raises(InvalidConfig):
        ExactSolutionSpec.example2(0.0)
    with pytest.raises(InvalidConfig):
        ExactSolutionSpec.frequency_bands([("no_such_coefficient", 1.0)])
    with pytest.raises(InvalidConfig):
        KernelSpec.custom("no_such_kernel")


def test_cosine_product_kernel():
    k = KernelSpec.cosine_product()
    assert k(0.5, -0.2) == pytest.approx(math.cos(0.5 * 0.8))


def test_problem_digest_stable_and_distinct():
    a = ProblemSpec(KernelSpec.constant(0.45), 10, one_band())
    b = ProblemSpec(KernelSpec.constant(0.45), 10, one_band())
    c = ProblemSpec(KernelSpec.constant(0.45), 11, one_band())
    assert a.digest() == b.digest() != c.digest()


# --- grid functions ---------------------------------------------------------


def test_grid_function_validation():
    with pytest.raises(ValueError):
        ComplexGridFunction.from_complex([0.0], [1.0])
    with pytest.raises(ValueError):
        ComplexGridFunction.from_complex([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        ComplexGridFunction.from_complex([0.0, 1.5], [1.0, 2.0])
    g = ComplexGridFunction.from_complex([-1.0, 1.0], [1 + 2j, 3 - 1j])
    assert np.array_equal(g.values, [1 + 2j, 3 - 1j])
    with pytest.raises(ValueError):
        g.re[0] = 5.0


# --- right-hand side --------------------------------------------------------


def test_zero_kernel_rhs_is_solution(tmp_path):
    p = ProblemSpec(KernelSpec.constant(0.0), 7, ExactSolutionSpec.example2(1.0))
    x = np.linspace(-1, 1, 33)
    f = compute_rhs(p, x, root=tmp_path)
    assert np.array_equal(f.values, exact_values(p.exact, x))


def test_rhs_closed_form_unit_solution(tmp_path):
    # 1 - 0.45 * int_{-1}^{1} e^{i|t|} dt = 1 - 0.9 (sin 1 + i (1 - cos 1))
    p = ProblemSpec(KernelSpec.constant(0.45), 1, one_band())
    f = compute_rhs(p, np.array([-1.0, 0.0, 1.0]), root=tmp_path).values
    expect = 1 - 0.9 * (math.sin(1) + 1j * (1 - math.cos(1)))
    assert abs(f[1] - expect) < 1e-14


@pytest.mark.parametrize("kappa,omega", [(3.0, 7.0), (10.0, -4.0), (25.0, 60.0)])
def test_rhs_closed_form_plane_wave(tmp_path, kappa, omega):
    c = 0.45
    p = ProblemSpec(KernelSpec.constant(c), kappa, one_band(omega))
    x = np.linspace(-1, 1, 41)
    f = compute_rhs(p, x, root=tmp_path).values
    a, b = 1j * (omega - kappa), 1j * (omega + kappa)
    integral = (np.exp(1j * kappa * x) * (np.exp(a * x) - np.exp(-a)) / a
                + np.exp(-1j * kappa * x) * (np.exp(b) - np.exp(b * x)) / b)
    expect = np.exp(1j * omega * x) - c * integral
    assert np.max(np.abs(f - expect)) < 1e-12


def test_rhs_matches_adaptive_quadrature_example2(tmp_path):
    p = ProblemSpec(KernelSpec.constant(0.45), 10, ExactSolutionSpec.example2(1.0))
    x = np.array([-0.73, -0.1, 0.0, 0.37, 0.9])
    f = compute_rhs(p, x, root=tmp_path).values
    for xi, fi in zip(x, f):
        def part(t, fn):
            return fn(0.45 * np.exp(1j * 10 * abs(xi - t)) * exact_values(p.exact, np.array([t]))[0])
        pts = sorted({-1.0, 0.0, float(xi), 1.0})
        re = sum(integrate.quad(part, a, b, args=(np.real,), limit=400, epsabs=1e-14)[0]
                 for a, b in zip(pts, pts[1:]))
        im = sum(integrate.quad(part, a, b, args=(np.imag,), limit=400, epsabs=1e-14)[0]
                 for a, b in zip(pts, pts[1:]))
        y = exact_values(p.exact, np.array([xi]))[0]
        assert abs(fi - (y - (re + 1j * im))) < 1e-10


def test_rhs_self_convergence_example2(tmp_path):
    p = ProblemSpec(KernelSpec.constant(0.45), 10, ExactSolutionSpec.example2(1.0))
    x = np.linspace(-1, 1, 81)
    fs = [compute_rhs(p, x, oversample=o, use_cache=False).values for o in (1, 2, 4, 8)]
    diffs = [np.max(np.abs(a - b)) for a, b in zip(fs, fs[1:])]
    assert diffs[0] < 1e-10
    assert diffs[0] > diffs[1] > diffs[2]


def test_rhs_cache_warm_is_bit_identical(tmp_path):
    p = ProblemSpec(KernelSpec.constant(0.45), 5, ExactSolutionSpec.example2(0.5))
    x = np.linspace(-1, 1, 21)
    a = compute_rhs(p, x, root=tmp_path).values
    path = _cache_path(p, x, 1, tmp_path)
    assert path.exists()
    b = compute_rhs(p, x, root=tmp_path).values
    assert a.tobytes() == b.tobytes()


def test_rhs_cache_corruption_regenerates(tmp_path):
    p = ProblemSpec(KernelSpec.constant(0.45), 5, one_band(2.0))
    x = np.linspace(-1, 1, 11)
    a = compute_rhs(p, x, root=tmp_path).values
    path = _cache_path(p, x, 1, tmp_path)
    path.write_bytes(b"garbage")
    with pytest.raises(CorruptCheckpoint):
        read_rhs_cache(path)
    b = compute_rhs(p, x, root=tmp_path).values
    assert np.array_equal(a, b)
    assert np.array_equal(read_rhs_cache(path, p.digest(), len(x)), a)


def test_rhs_cache_rejects_mismatch(tmp_path):
    path = tmp_path / "c.bin"
    write_rhs_cache(path, b"\x01" * 32, np.array([1 + 2j, 3j]))
    with pytest.raises(CorruptCheckpoint):
        read_rhs_cache(path, b"\x02" * 32)
    with pytest.raises(CorruptCheckpoint):
        read_rhs_cache(path, b"\x01" * 32, count=3)
    raw = bytearray(path.read_bytes())
    raw[8] = 9  # version field
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpoint):
        read_rhs_cache(path)


def test_cache_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("OSCIDAL_CACHE_DIR", str(tmp_path))
    assert cache_dir() == tmp_path


finite = st.floats(-1e300, 1e300, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=0, max_size=40))
def test_rhs_cache_roundtrip_property(tmp_path_factory, pairs):
    path = tmp_path_factory.mktemp("c") / "rhs.bin"
    v = np.array([complex(a, b) for a, b in pairs], dtype=complex)
    write_rhs_cache(path, b"\x07" * 32, v)
    assert read_rhs_cache(path, b"\x07" * 32, len(v)).tobytes() == v.tobytes()
