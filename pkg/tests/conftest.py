import numpy as np
import pytest

from epiground import policy, world


@pytest.fixture(scope="session")
def apartment():
    return world.bundled_scene("apartment")


@pytest.fixture(scope="session")
def tasks():
    return world.load_tasks(world.bundled_text("apartment.tasks"))


@pytest.fixture(scope="session")
def gold_plans(apartment, tasks):
    return [world.shortest_plan(apartment, t, max_depth=14) for t in tasks]


@pytest.fixture()
def tiny_vocab():
    return policy.Vocabulary(["walk", "grab", "cup", "table", "goal", "plan", "at", "x",
                              "walk x", "grab cup", "walk table"])


def finite_difference_error(model, loss_of, grads, n=200, seed=0, h=1e-5):
    """Worst relative error between analytic and central-difference gradients.

    ``model`` needs ``params`` (ordered dict of arrays); entries are perturbed in place.
    """
    rng = np.random.default_rng(seed)
    keys = list(model.params)
    sizes = [model.params[k].size for k in keys]
    offsets = np.cumsum([0] + sizes)
    picks = rng.choice(offsets[-1], size=min(n, offsets[-1]), replace=False)
    worst = 0.0
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        k, j = keys[i], int(flat - offsets[i])
        p = model.params[k].reshape(-1)
        old = p[j]
        p[j] = old + h
        up = loss_of(model)
        p[j] = old - h
        down = loss_of(model)
        p[j] = old
        num = (up - down) / (2 * h)
        ana = float(grads[k].reshape(-1)[j])
        scale = max(abs(num), abs(ana))
        if scale > 1e-6:
            worst = max(worst, abs(num - ana) / scale)
        else:
            worst = max(worst, abs(num - ana))
    return worst, len(picks)
