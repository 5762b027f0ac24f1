import numpy as np
import pytest
import torch
import torch.nn as nn

from advsig.victim_zoo import VictimSpec, build_victim


class Affine(nn.Module):
    """Logits = W vec(x) + b; the attacks see an ordinary image classifier."""

    def __init__(self, W: np.ndarray, b: np.ndarray):
        super().__init__()
        self.lin = nn.Linear(W.shape[1], W.shape[0])
        with torch.no_grad():
            self.lin.weight.copy_(torch.from_numpy(W))
            self.lin.bias.copy_(torch.from_numpy(b))

    def forward(self, x):
        return self.lin(x.flatten(1))


@pytest.fixture
def affine_factory():
    return Affine


@pytest.fixture(scope="session")
def tiny_victim():
    return build_victim(VictimSpec("desk_cnn", input_shape=(3, 8, 8), width=4, seed=3))


@pytest.fixture(scope="session")
def tiny_images():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(12, 3, 8, 8, generator=g)
    y = torch.arange(12) % 10
    return x, y


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory, tiny_victim):
    """Six-kind dataset on 8x8 images with short attack runs."""
    from dataclasses import replace

    from advsig.adv_dataset import generate_dataset
    from advsig.attacks import full_grid
    from advsig.data import ImageSet

    g = torch.Generator().manual_seed(1)
    def split(n, offset):
        return ImageSet(torch.rand(n, 3, 8, 8, generator=g), torch.arange(n) % 10,
                        torch.arange(offset, offset + n))
    grid = {k: [replace(c, steps=min(c.steps, 4), patch_side=min(c.patch_side, 4)) for c in v]
            for k, v in full_grid().items()}
    root = tmp_path_factory.mktemp("tinyds")
    return generate_dataset(tiny_victim, {"train": split(16, 0), "test": split(8, 1000)},
                            grid, seed=0, root=root, dataset_tag="tiny", batch_size=8, shard_size=40)


_REPORT_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criterion_report(request):
    """Collects one line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_REPORT_KEY, [])

    def report(number: int, passed: bool | None, detail: str):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        lines.append(f"criterion {number:2d} {status}: {detail}")
        print(lines[-1])
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
