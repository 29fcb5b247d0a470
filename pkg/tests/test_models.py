import numpy as np
import pytest
import torch

from cmes.data import QMatrix
from cmes.errors import ConfigError
from cmes.mixer import EmbeddingTable
from cmes.models import (
    DiagnosisModel, MixedSample, ModelKind, clamp_nonnegative, init_parameters, predict_interacted, predict_mixed,
)


def make(kind, n=4, d=3, seed=0, hidden=(8, 4)):
    m = DiagnosisModel(kind, n, d, d, hidden)
    init_parameters(m, torch.Generator().manual_seed(seed))
    return m


def setup_table(M=5, d=3, seed=0):
    t = EmbeddingTable(M, d)
    init_parameters(t, torch.Generator().manual_seed(seed))
    return t


def test_irt_symmetry_point():
    m = make("irt")
    e = torch.randn(1, 3, dtype=torch.float64)
    with torch.no_grad():
        b = m.difficulty(e).item()
        m.theta[0, 0] = b
    assert m(torch.tensor([0]), e).item() == pytest.approx(0.5, abs=1e-15)


def test_mirt_zero_logit():
    m = make("mirt")
    with torch.no_grad():
        m.difficulty.bias.zero_()
    assert m(torch.tensor([1]), torch.zeros(1, 3, dtype=torch.float64)).item() == 0.5


def test_mirt_reduces_to_irt_in_one_dimension():
    # sigmoid(theta * e - b) == sigmoid(a * (theta * e / a - b / a))
    irt, mirt = make("irt", d=1), make("mirt", d=1)
    e = torch.tensor([[0.8]], dtype=torch.float64)
    with torch.no_grad():
        mirt.theta[0, 0] = 1.3
        mirt.difficulty.weight.zero_()
        mirt.difficulty.bias.fill_(0.4)
        a = torch.nn.functional.softplus(irt.discrimination(e)).item()
        irt.difficulty.weight.zero_()
        irt.difficulty.bias.fill_(0.4 / a)
        irt.theta[0, 0] = 1.3 * 0.8 / a
    lhs = mirt(torch.tensor([0]), e).item()
    assert lhs == pytest.approx(1 / (1 + np.exp(-(1.3 * 0.8 - 0.4))), abs=1e-14)
    assert irt(torch.tensor([0]), e).item() == pytest.approx(lhs, abs=1e-14)


def test_ncd_requires_concept_aligned_dim():
    with pytest.raises(ConfigError):
        DiagnosisModel("ncd", 3, 4, 5)


def test_ncd_monotone_in_proficiency():
    rng = np.random.default_rng(0)
    for draw in range(100):
        m = make("ncd", d=4, seed=draw)
        with torch.no_grad():
            for p in m.parameters():
                p.add_(torch.randn(p.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(draw)))
        clamp_nonnegative(m)
        e = torch.randn(1, 4, dtype=torch.float64)
        mask = torch.tensor([[1.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
        c = int(rng.choice([0, 2, 3]))
        base = m(torch.tensor([0]), e, mask).item()
        # +0.1 on sigmoid(theta_c) == moving theta_c to logit(sigmoid(theta_c) + 0.1)
        with torch.no_grad():
            s = torch.sigmoid(m.theta[0, c]).item()
            if s + 0.1 >= 1:
                continue
            m.theta[0, c] = float(np.log((s + 0.1) / (1 - s - 0.1)))
        assert m(torch.tensor([0]), e, mask).item() >= base


def test_clamp():
    m = make("ncd", d=2, hidden=(1, 1))
    with torch.no_grad():
        m.layer1.weight.copy_(torch.tensor([[0.2, -0.1]], dtype=torch.float64))
    clamp_nonnegative(m)
    assert m.layer1.weight.tolist() == [[0.2, 0.0]]
    before = [w.clone() for w in m.constrained()]
    clamp_nonnegative(m)
    assert all(torch.equal(a, b) for a, b in zip(before, m.constrained()))


@pytest.mark.parametrize("kind", list(ModelKind))
def test_mixed_equals_interacted_for_raw_embedding(kind):
    q = QMatrix.from_dense([[1, 0, 0], [0, 1, 1], [1, 1, 0], [0, 0, 1], [1, 0, 1]])
    table = setup_table()
    m = make(kind, seed=3)
    for e in range(5):
        sample = MixedSample(1, e, (), table.weight[e].detach(), torch.tensor(q.dense[e], dtype=torch.float64))
        assert predict_mixed(m, 1, sample) == predict_interacted(m, 1, e, table, q)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_range_sweep(kind):
    gen = torch.Generator().manual_seed(11)
    m = make(kind, n=10, d=4, seed=2)
    students = torch.randint(0, 10, (1000,), generator=gen)
    vec = 2 * torch.randn(1000, 4, generator=gen, dtype=torch.float64)
    mask = (torch.rand(1000, 4, generator=gen) < 0.5).to(torch.float64)
    mask[:, 0] = 1
    with torch.no_grad():
        y = m(students, vec, mask)
    assert ((y > 0) & (y < 1)).all()


def test_out_of_range_ids():
    q = QMatrix.from_dense(np.eye(3))
    table, m = setup_table(3), make("mirt")
    with pytest.raises(IndexError):
        predict_interacted(m, 0, 3, table, q)
    with pytest.raises(IndexError):
        predict_interacted(m, 4, 0, table, q)


def test_init_is_xavier_and_seeded():
    a, b = make("ncd", seed=5), make("ncd", seed=5)
    for (n1, p1), (_, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p1, p2), n1
    bound = np.sqrt(6 / (4 + 3))
    assert a.theta.abs().max() <= bound
    assert all((w >= 0).all() for w in a.constrained())


def test_ncd_initial_output_centered():
    m = make("ncd", n=3, d=5, hidden=(64, 32))
    vec = torch.zeros(3, 5, dtype=torch.float64)
    with torch.no_grad():
        y = m(torch.arange(3), vec, torch.ones(3, 5, dtype=torch.float64))
    assert ((y - 0.5).abs() < 0.05).all()


def test_mastery_report_shapes():
    assert make("ncd", n=4, d=3).mastery().shape == (4, 3)
    assert make("irt", n=4, d=3).mastery().shape == (4,)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_range_holds_for_extreme_inputs(kind):
    m = make(kind, n=2, d=3)
    vec = torch.tensor([[1e3, -1e3, 1e3], [-1e3, 1e3, -1e3]], dtype=torch.float64)
    with torch.no_grad():
        m.theta.mul_(1e3)
        y = m(torch.arange(2), vec, torch.ones(2, 3, dtype=torch.float64))
    assert ((y > 0) & (y < 1)).all()
