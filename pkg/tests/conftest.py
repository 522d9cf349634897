import numpy as np
import pytest

from miencap.features import FeatureStats
from miencap.neural import DenseLayer, NetworkModel
from miencap.retarget import HISTORY_LEN, CalibrationProfile, RetargetPipeline
from miencap.retrieval import ExpressionDatabase, ExpressionRecord
from miencap.rig import BlendshapeBank, CharacterRig, ControllerSpec, Mesh

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def unit_stats() -> FeatureStats:
    return FeatureStats(mins=np.zeros(9), maxs=np.ones(9))


def make_record(rid, emotion, geometry, label="neutral", payload=""):
    return ExpressionRecord(id=rid, emotion=np.asarray(emotion, dtype=np.float64),
                            geometry=np.asarray(geometry, dtype=np.float64),
                            label=label, payload=payload)


def random_db(n, seed, tag="human"):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        emo = rng.dirichlet(np.full(7, 0.6))
        geo = rng.uniform(0.0, 1.0, size=9)
        records.append(make_record(f"{tag}-{i:04d}", emo, geo))
    return ExpressionDatabase(records=tuple(records), stats=unit_stats(),
                              source_tag=tag)


def tiny_bank(seed=0, vertices=4, deltas=3):
    rng = np.random.default_rng(seed)
    neutral = Mesh(rng.normal(size=3 * vertices))
    named = tuple(
        (f"shape_{i}", Mesh(rng.normal(size=3 * vertices))) for i in range(deltas)
    )
    return BlendshapeBank(neutral=neutral, deltas=named)


def unit_rig(rig_id, count):
    return CharacterRig(
        id=rig_id,
        controllers=tuple(ControllerSpec(name=f"c{i}") for i in range(count)),
    )


def passthrough_model(n_out, n_in, metadata=None):
    # Identity on the first n_out inputs, zero elsewhere.
    w = np.zeros((n_out, n_in))
    w[:, :n_out] = np.eye(n_out)
    layer = DenseLayer(weights=w, bias=np.zeros(n_out), activation="identity")
    return NetworkModel(layers=(layer,), metadata=dict(metadata or {}))


def zero_model(n_out, n_in):
    layer = DenseLayer(weights=np.zeros((n_out, n_in)), bias=np.zeros(n_out),
                       activation="identity")
    return NetworkModel(layers=(layer,), metadata={})


def make_pipeline(channels=2, controllers=3, model=None, neutral=None,
                  secondaries=None, secondary_rigs=None, config=None):
    if model is None:
        model = passthrough_model(controllers,
                                  channels + HISTORY_LEN * controllers)
    profile = CalibrationProfile(
        np.zeros(channels) if neutral is None else np.asarray(neutral), 1)
    return RetargetPipeline(
        channels=[f"ch{i}" for i in range(channels)],
        calibration=profile,
        adaption=model,
        primary_rig=unit_rig("hero", controllers),
        secondaries=secondaries,
        secondary_rigs=secondary_rigs,
        config=config,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
