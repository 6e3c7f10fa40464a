import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from rydcav.model import SCHEMES, SystemSpec, build, mhz
from rydcav.operators import DensityMatrix, HilbertDims, Operator, partial_trace, tensor
from rydcav.solver import rhs

pytestmark = pytest.mark.filterwarnings("ignore::rydcav.operators.TruncationWarning")

PROFILE = settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])

freq = st.floats(min_value=-20.0, max_value=20.0, allow_nan=False)
rate = st.floats(min_value=0.0, max_value=30.0, allow_nan=False)


@st.composite
def specs(draw):
    return SystemSpec(
        scheme=draw(st.sampled_from(SCHEMES)),
        delta=mhz(draw(freq)),
        delta_prime=mhz(draw(freq)),
        delta_c=mhz(draw(freq)),
        g=mhz(draw(rate)),
        omega_drive=mhz(draw(rate)),
        omega_dress=mhz(draw(rate)),
        q_factor=draw(st.floats(min_value=1e3, max_value=1e7)),
        temperature=draw(st.floats(min_value=0.0, max_value=10.0)),
        n_max=draw(st.integers(min_value=1, max_value=4)),
    )


def random_state(d, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = m @ m.conj().T
    return rho / np.trace(rho)


@PROFILE
@given(specs())
def test_hamiltonian_hermitian(spec):
    H = build(spec).hamiltonian.to_dense()
    np.testing.assert_allclose(H, H.conj().T, atol=1e-12)


@PROFILE
@given(specs(), st.integers(0, 2**32 - 1))
def test_generator_hermitian_and_traceless(spec, seed):
    model = build(spec)
    out = rhs(model, random_state(model.dims.total, seed))
    scale = max(1.0, float(np.abs(out).max()))
    np.testing.assert_allclose(out, out.conj().T, atol=1e-11 * scale)
    assert abs(np.trace(out)) < 1e-10 * scale


dims_st = st.lists(st.integers(1, 3), min_size=1, max_size=3)


def random_operator(d, seed):
    rng = np.random.default_rng(seed)
    return Operator(HilbertDims((d,)), rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_tensor_associative(a, b, c, seed):
    A, B, C = (random_operator(d, seed + k) for k, d in enumerate((a, b, c)))
    left = tensor([tensor([A, B]), C]).to_dense()
    right = tensor([A, tensor([B, C])]).to_dense()
    np.testing.assert_allclose(left, right, atol=1e-13)
    np.testing.assert_allclose(tensor([A, B, C]).to_dense(), left, atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(dims_st, st.integers(0, 2**32 - 1), st.data())
def test_partial_trace_composes(factors, seed, data):
    d = int(np.prod(factors))
    rho = DensityMatrix(HilbertDims(tuple(factors)), random_state(d, seed))
    keep = data.draw(st.sets(st.integers(0, len(factors) - 1), min_size=1))
    reduced = partial_trace(rho, keep)
    assert np.trace(reduced.data).real == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(reduced.data, reduced.data.conj().T, atol=1e-13)
    assert np.linalg.eigvalsh(reduced.data)[0] >= -1e-12
    # tracing one factor at a time matches tracing them together
    if len(keep) > 1:
        first = sorted(keep)[0]
        kept = sorted(keep)
        step = partial_trace(rho, kept)
        again = partial_trace(step, [kept.index(first)])
        np.testing.assert_allclose(again.data, partial_trace(rho, [first]).data, atol=1e-12)
