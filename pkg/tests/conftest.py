import numpy as np
import pytest
import torch

from handfield.deformation import CanonicalBox, CorrectorConfig, ErrorCorrector, PosedHand
from handfield.hand import Pose, generate_procedural_hand
from handfield.io.scene import SceneSpec, generate_dataset
from handfield.nn import ParameterStore
from handfield.radiance import CanonicalField, FieldConfig
from handfield.render import SceneState

torch.set_num_threads(1)

# PASS/FAIL lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def right_hand():
    return generate_procedural_hand("right", 0)


@pytest.fixture(scope="session")
def left_hand():
    return generate_procedural_hand("left", 0)


@pytest.fixture(scope="session")
def tiny_scene():
    """One hand, 16x16 images, 2 training views, 1 test view, 2 frames."""
    return generate_dataset(SceneSpec(hands="right", n_frames=2, n_train_views=2, n_test_views=1, image_size=16), seed=0)


@pytest.fixture(scope="session")
def small_scene():
    return generate_dataset(SceneSpec(hands="right", n_frames=2, n_train_views=2, n_test_views=1, image_size=24), seed=1)


@pytest.fixture(scope="session")
def two_hand_scene():
    return generate_dataset(SceneSpec(hands="both", n_frames=1, n_train_views=2, n_test_views=1, image_size=40, pose_family="interlock"), seed=0)


def random_pose(rng, scale=0.3, trans=0.05):
    return Pose(rng.normal(0, scale, (16, 3)), rng.normal(0, scale, 3), rng.normal(0, trans, 3))


def perturb_corrector(corrector: ErrorCorrector, seed: int, scale: float = 0.05):
    """Give the zero-initialized final layer random values so corrections are nonzero."""
    g = torch.Generator().manual_seed(seed)
    last = corrector.spec.n_layers - 1
    with torch.no_grad():
        for n in (f"correction.{last}.weight", f"correction.{last}.bias"):
            t = corrector.store[n]
            t.copy_(scale * torch.randn(t.shape, generator=g, dtype=torch.float64).to(t.dtype))


def make_state(scene, frame_index=0, seed=0, dtype=torch.float64, sigma_bias=0.5, frame="train", perturb=True, n_samples=64, activation="relu"):
    box = CanonicalBox.from_vertices(scene.canonical_vertices())
    cfg = FieldConfig(sigma_bias=sigma_bias, activation=activation)
    fld = CanonicalField(cfg, [f.frame_id for f in scene.frames], box, dtype, seed)
    store = ParameterStore(dtype)
    corr = ErrorCorrector(store, box, CorrectorConfig(activation=activation), torch.Generator().manual_seed(seed + 7))
    if perturb:
        perturb_corrector(corr, seed)
    f = scene.frames[frame_index]
    hands = [PosedHand.build(scene.hands[s][0], scene.hands[s][1], f.poses[s]) for s in scene.sides]
    return SceneState(fld, corr, hands, f.frame_id if frame == "train" else frame, scene.background, n_samples)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
