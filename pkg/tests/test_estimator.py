import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from galign.errors import DataError
from galign.estimator import SentenceGrounder
from galign.grounding import SimilarityMap, threshold_mask
from galign.textenc import Vocab
from galign.trainer import TrainConfig, train
from galign.visenc import ImageSample

POSITIONS = ["left", "right", "top", "bottom"]


def tiny_pairs(n=8, seed=0):
    """8x8 images with a bright square whose location matches the text."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        pos = POSITIONS[i % len(POSITIONS)]
        pixels = np.full((8, 8), 0.1)
        r0 = {"left": 3, "right": 3, "top": 0, "bottom": 5}[pos]
        c0 = {"left": 0, "right": 5, "top": 3, "bottom": 3}[pos]
        pixels[r0 : r0 + 3, c0 : c0 + 3] = 0.9
        pixels = np.clip(pixels + rng.normal(0.0, 0.01, size=(8, 8)), 0.0, 1.0)
        pairs.append((pixels, f"bright square {pos}."))
    return pairs


def tiny_grounder(**overrides):
    kwargs = dict(
        dim=6,
        patch_size=4,
        text_hidden=6,
        vision_hidden=8,
        batch_size=4,
        epochs=2,
        lr0=1e-2,
        seed=0,
    )
    kwargs.update(overrides)
    return SentenceGrounder(**kwargs)


@pytest.fixture(scope="module")
def fitted():
    return tiny_grounder().fit(tiny_pairs())


class TestEstimatorProtocol:
    def test_get_params_round_trips_through_set_params(self):
        est = tiny_grounder()
        params = est.get_params()
        assert params["dim"] == 6
        assert params["threshold"] == 0.3
        other = SentenceGrounder().set_params(**params)
        assert other.get_params() == params

    def test_clone_copies_params_without_fitted_state(self, fitted):
        copy = clone(fitted)
        assert copy.get_params() == fitted.get_params()
        with pytest.raises(NotFittedError):
            copy.predict([(tiny_pairs()[0][0], "bright square left.")])

    def test_unfitted_calls_raise(self):
        est = tiny_grounder()
        pair = [(np.zeros((8, 8)), "bright square left.")]
        with pytest.raises(NotFittedError):
            est.transform(pair)
        with pytest.raises(NotFittedError):
            est.ground("bright square left.", np.zeros((8, 8)))


class TestFit:
    def test_fit_returns_self_and_sets_state(self, fitted):
        assert isinstance(fitted, SentenceGrounder)
        assert fitted.n_iter_ == 2
        assert len(fitted.history_) == 2
        assert fitted.checkpoint_.epoch == 2
        assert "square" in fitted.vocab_.pieces

    def test_fit_matches_functional_training(self, fitted):
        pairs = [(ImageSample(pixels=np.asarray(p)), t) for p, t in tiny_pairs()]
        vocab = Vocab.from_texts(t for _, t in pairs)
        cfg = fitted._train_config()
        assert isinstance(cfg, TrainConfig)
        ckpt, logs = train(pairs, vocab, cfg)
        for name, arr in ckpt.params.items():
            np.testing.assert_array_equal(arr, fitted.checkpoint_.params[name])
        assert [log.total for log in logs] == [
            log.total for log in fitted.history_
        ]

    def test_same_seed_fits_identically(self):
        a = tiny_grounder().fit(tiny_pairs())
        b = tiny_grounder().fit(tiny_pairs())
        for name, arr in a.checkpoint_.params.items():
            np.testing.assert_array_equal(arr, b.checkpoint_.params[name])

    def test_rejects_non_pair_samples(self):
        with pytest.raises(DataError, match="sample 0"):
            tiny_grounder().fit([np.zeros((8, 8))])

    def test_rejects_non_string_text(self):
        with pytest.raises(DataError, match="sample 1"):
            tiny_grounder().fit([(np.zeros((8, 8)), "ok."), (np.zeros((8, 8)), 3)])

    def test_rejects_empty_input(self):
        with pytest.raises(DataError):
            tiny_grounder().fit([])


class TestPredictionSurface:
    def test_transform_yields_similarity_maps(self, fitted):
        queries = [(p, "bright square left.") for p, _ in tiny_pairs()[:3]]
        maps = fitted.transform(queries)
        assert len(maps) == 3
        for smap in maps:
            assert isinstance(smap, SimilarityMap)
            assert smap.grid.shape == (2, 2)
            assert smap.upsampled.shape == (8, 8)

    def test_predict_is_thresholded_transform(self, fitted):
        queries = [(p, t) for p, t in tiny_pairs()[:4]]
        maps = fitted.transform(queries)
        masks = fitted.predict(queries)
        for smap, mask in zip(maps, masks):
            np.testing.assert_array_equal(
                mask.bits, threshold_mask(smap, fitted.threshold).bits
            )

    def test_threshold_parameter_controls_predict(self, fitted):
        queries = [(tiny_pairs()[0][0], "bright square left.")]
        low = clone(fitted).set_params(threshold=-1.0)
        low.vocab_ = fitted.vocab_
        low.checkpoint_ = fitted.checkpoint_
        assert np.all(low.predict(queries)[0].bits)

    def test_ground_matches_transform(self, fitted):
        image, text = tiny_pairs()[0]
        smap = fitted.ground(text, image)
        via_transform = fitted.transform([(image, text)])[0]
        np.testing.assert_array_equal(smap.grid, via_transform.grid)

    def test_score_is_mean_iou(self, fitted):
        queries = [(p, t) for p, t in tiny_pairs()[:2]]
        masks = [m.bits for m in fitted.predict(queries)]
        assert fitted.score(queries, masks) == pytest.approx(1.0)
        inverted = [~m for m in masks]
        assert fitted.score(queries, inverted) == pytest.approx(0.0)

    def test_score_rejects_length_mismatch(self, fitted):
        queries = [(p, t) for p, t in tiny_pairs()[:2]]
        with pytest.raises(DataError):
            fitted.score(queries, [np.zeros((8, 8), dtype=bool)])
