import pytest

from revbio.evaluate import Corpus
from revbio.metrics import fmr_threshold
from revbio.registry import Registry
from revbio.simulate import SimWorldConfig, SyntheticExtractor, calibrate_sigma


@pytest.fixture(scope="session")
def default_config() -> SimWorldConfig:
    """The headline evaluation world: N=10 instances, 200 identities x 4
    images at D=512, master seed 42, default noise scale."""
    return SimWorldConfig(
        num_identities=200,
        images_per_identity=4,
        num_instances=10,
        dim=512,
        master_seed=42,
    )


@pytest.fixture(scope="session")
def default_corpus(default_config) -> Corpus:
    return Corpus.from_config(default_config)


@pytest.fixture(scope="session")
def calibrated_sigma(default_config) -> float:
    return calibrate_sigma(default_config, 7.0)


@pytest.fixture(scope="session")
def calibrated_config(default_config, calibrated_sigma) -> SimWorldConfig:
    from dataclasses import replace

    return replace(default_config, sigma=calibrated_sigma)


@pytest.fixture(scope="session")
def calibrated_corpus(calibrated_config) -> Corpus:
    return Corpus.from_config(calibrated_config)


@pytest.fixture(scope="session")
def separated_config() -> SimWorldConfig:
    """A small world with wide genuine/impostor separation (low noise), so
    accept/reject outcomes are unambiguous in lifecycle and service tests."""
    return SimWorldConfig(
        num_identities=40,
        images_per_identity=3,
        num_instances=4,
        dim=256,
        sigma=0.5,
        master_seed=11,
    )


@pytest.fixture(scope="session")
def separated_thresholds(separated_config) -> dict:
    """Per-instance FMR@1e-3 thresholds for the separated world."""
    import warnings

    from revbio.metrics import CalibrationWarning

    corpus = Corpus.from_config(separated_config)
    protocol = corpus.pair_protocol()
    out = {}
    with warnings.catch_warnings():
        # 7020 impostor pairs against target 1e-3: the small-tail warning is
        # expected at this scale and irrelevant to these fixtures
        warnings.simplefilter("ignore", CalibrationWarning)
        for iid in corpus.instance_ids:
            _, impostor = corpus.same_model_scores(iid, protocol)
            out[iid] = fmr_threshold(impostor, 1e-3)
    return out


@pytest.fixture()
def separated_registry(separated_config, separated_thresholds) -> Registry:
    """Fresh registry with every instance of the separated world thresholded."""
    registry = Registry(separated_config.dim)
    for iid, spec in separated_thresholds.items():
        registry.register_instance(iid, threshold=spec, at=0.0)
    return registry


@pytest.fixture(scope="session")
def separated_extractor(separated_config) -> SyntheticExtractor:
    return SyntheticExtractor(separated_config)
