"""Central finite differences against autograd in float64, on a two-block toy model."""

import numpy as np
import pytest
import torch

from marstrn.backbone import ModelConfig
from marstrn.mars import total_objective
from marstrn.metric_losses import build_loss, ms_mine
from marstrn.model import LandmarkNet
from marstrn.transforms import TransformSpec

TOY = dict(num_blocks=2, channels=[16, 32], input_resolution=16, embedding_dim=8)
REL_TOL = 1e-3
STEP = 1e-6
N_WEIGHTS = 10


def make_problem(variant="mars", loss="ntxent", seed=0):
    torch.manual_seed(seed)
    model = LandmarkNet(ModelConfig.variant(variant, **TOY)).double().train()
    rng = np.random.default_rng(seed)
    images = torch.from_numpy(rng.random((8, 1, 16, 16)))
    labels = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    transforms = [TransformSpec(rotation_deg=float(rng.uniform(0, 360)), translate_x=float(rng.uniform(-1, 1)),
                                ref_resolution=(16, 16)) for _ in range(8)]
    loss_fn = build_loss(loss, 4, 8).double()
    with torch.no_grad():
        z, _ = model(images)
    mined = ms_mine(z, labels, epsilon=2.0)  # wide margin: every negative kept, mining frozen
    twins = (np.arange(4), np.arange(4) + 4)

    def objective():
        z, maps = model(images)
        total, _, _ = total_objective(loss_fn, z, labels, mined, maps, transforms, model.mars, twins=twins)
        return total

    return model, loss_fn, objective


def check_params(objective, named_params):
    named_params = list(named_params)
    assert named_params
    total = objective()
    grads = torch.autograd.grad(total, [p for _, p in named_params], allow_unused=True)
    rng = np.random.default_rng(7)
    flat = [(name, p, g) for (name, p), g in zip(named_params, grads)]
    sizes = np.array([p.numel() for _, p, _ in flat], dtype=float)
    picks = rng.choice(len(flat), size=N_WEIGHTS, p=sizes / sizes.sum())
    checked = 0
    for k in picks:
        name, p, g = flat[k]
        idx = int(rng.integers(p.numel()))
        analytic = 0.0 if g is None else float(g.reshape(-1)[idx])
        with torch.no_grad():
            orig = float(p.view(-1)[idx])
            p.view(-1)[idx] = orig + STEP
            up = float(objective())
            p.view(-1)[idx] = orig - STEP
            down = float(objective())
            p.view(-1)[idx] = orig
        numeric = (up - down) / (2 * STEP)
        scale = max(abs(analytic), abs(numeric), 1e-6)
        assert abs(analytic - numeric) <= REL_TOL * scale, f"{name}[{idx}]: autograd {analytic} vs fd {numeric}"
        checked += 1
    assert checked == N_WEIGHTS


def select(model, *fragments):
    return [(n, p) for n, p in model.named_parameters() if any(f in n for f in fragments)]


def test_reducers():
    model, _, objective = make_problem()
    check_params(objective, select(model, "reducer"))


@pytest.mark.parametrize("head", ["gc", "gy", "gx"])
def test_mini_heads(head):
    model, _, objective = make_problem()
    check_params(objective, select(model, f".{head}."))


def test_coordinate_attention_gates():
    model, _, objective = make_problem()
    check_params(objective, select(model, "attention.conv_h", "attention.conv_w", "attention.conv1"))


def test_squeeze_excitation_gates():
    model, _, objective = make_problem("conv2d_se")
    check_params(objective, select(model, "attention.fc"))


def test_ric_weights():
    model, _, objective = make_problem()
    check_params(objective, select(model, "conv2.weight", "stem.0.weight"))


def test_embedding_head():
    model, _, objective = make_problem()
    check_params(objective, select(model, "head."))


@pytest.mark.parametrize("loss", ["ntxent", "supcon", "proxy_anchor"])
def test_mandatory_losses(loss):
    model, loss_fn, objective = make_problem(loss=loss, seed=1)
    params = select(model, "head.linear", "blocks.1.conv3") + [("loss." + n, p) for n, p in loss_fn.named_parameters()]
    check_params(objective, params)


def test_proxy_gradients():
    _, loss_fn, objective = make_problem(loss="proxy_anchor", seed=2)
    check_params(objective, [("proxies", loss_fn.proxies)])
