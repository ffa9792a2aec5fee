import math

import numpy as np
import pytest

from vkd.data import (
    Dataset,
    DatasetFormatError,
    GenSpec,
    generate,
    ground_truth,
    read_dataset,
    split,
    write_dataset,
)
from vkd.inference import auc


def _ridge_auc(features, labels, n_train, lam=1.0):
    X = np.hstack([features, np.ones((features.shape[0], 1))])
    Xtr, Xte = X[:n_train], X[n_train:]
    W = np.linalg.solve(Xtr.T @ Xtr + lam * np.eye(X.shape[1]), Xtr.T @ labels[:n_train])
    scores = Xte @ W
    return np.mean([auc(scores[:, j], labels[n_train:, j]) for j in range(labels.shape[1])])


def _bag_of_words(ds):
    """Mean-pooled one-hot tokens, padding excluded."""
    counts = np.zeros((len(ds), ds.vocab))
    for i, row in enumerate(ds.tokens):
        for t in row[row != 0]:
            counts[i, t] += 1
    return counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)


def test_generation_is_deterministic():
    a, b = generate(GenSpec(n_samples=50, seed=9)), generate(GenSpec(n_samples=50, seed=9))
    assert a == b
    assert not (a == generate(GenSpec(n_samples=50, seed=10)))


def test_shapes_and_token_layout():
    spec = GenSpec(n_samples=40)
    ds = generate(spec)
    assert ds.dims == {"n": 40, "d": 16, "s": 32, "v": 256, "k": 6}
    truth = ground_truth(spec)
    for row, y in zip(ds.tokens, ds.labels):
        nz = row[row != 0]
        assert np.all(row[nz.size:] == 0), "padding is trailing"
        findings = nz[nz <= spec.n_classes]
        assert set(findings) <= set(np.flatnonzero(y) + 1)
        concept = nz[nz > spec.n_classes]
        assert concept.size == spec.concept_dim
        assert set(concept) <= set(truth.sign_tokens.ravel())


def test_noiseless_views_determine_labels():
    spec = GenSpec(n_samples=400, image_noise=0.0, keyword_prob=1.0, seed=2)
    ds = generate(spec)
    bow = _bag_of_words(ds)
    # with p_kw=1 finding token j+1 is present exactly when label j is on
    for j in range(spec.n_classes):
        assert auc(bow[:, j + 1], ds.labels[:, j]) == 1.0
    # the image is a full-column-rank linear map of the concept, so labels are half-spaces of it
    truth = ground_truth(spec)
    concept = np.linalg.lstsq(truth.mixing, ds.image.T, rcond=None)[0].T
    margins = concept @ truth.hyperplanes.T
    for j in range(spec.n_classes):
        assert auc(margins[:, j], ds.labels[:, j]) == 1.0


def test_text_is_more_informative_than_image():
    ds = generate(GenSpec(n_samples=5000, seed=4))
    text_auc = _ridge_auc(_bag_of_words(ds), ds.labels, 4000, lam=1e-2)
    image_auc = _ridge_auc(ds.image, ds.labels, 4000)
    assert text_auc > image_auc + 0.05


def test_image_signal_decreases_with_noise():
    sets = [generate(GenSpec(n_samples=3000, image_noise=s, seed=4)) for s in (0.5, 1.0, 2.0, 4.0)]
    scores = [_ridge_auc(ds.image, ds.labels, 2000) for ds in sets]
    assert scores == sorted(scores, reverse=True)
    for ds in sets[1:]:
        assert np.array_equal(ds.tokens, sets[0].tokens) and np.array_equal(ds.labels, sets[0].labels)


def test_label_prevalence_is_half():
    ds = generate(GenSpec(n_samples=6000, seed=0))
    n = ds.labels.size
    se = math.sqrt(0.25 / n)
    assert abs(ds.labels.mean() - 0.5) < 3 * se * math.sqrt(ds.labels.shape[1])


@pytest.mark.parametrize("bad", [
    {"n_samples": -1}, {"keyword_prob": 1.5}, {"image_noise": -1.0},
    {"vocab": 6, "n_classes": 6}, {"seq_len": 10},
])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        generate(GenSpec(**bad))


class TestFormat:
    def test_round_trip(self, tmp_path):
        ds = generate(GenSpec(n_samples=30, seed=1))
        path = tmp_path / "d.vkds"
        write_dataset(ds, path)
        assert read_dataset(path) == ds
        text = path.read_text()
        assert text.splitlines()[:2] == ["vkds 1", "n=30 d=16 s=32 v=256 k=6"]

    def test_empty(self, tmp_path):
        ds = generate(GenSpec(n_samples=0))
        write_dataset(ds, tmp_path / "e.vkds")
        back = read_dataset(tmp_path / "e.vkds")
        assert len(back) == 0 and back.dims == ds.dims

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.vkds"
        write_dataset(generate(GenSpec(n_samples=5)), path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(DatasetFormatError, match="expected 5 samples, found 3"):
            read_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.vkds"
        path.write_text("nope\n")
        with pytest.raises(DatasetFormatError) as err:
            read_dataset(path)
        assert err.value.line == 1

    @pytest.mark.parametrize("mutate,match", [
        (lambda r: r.replace(" | ", " 1.0 | ", 1), "field counts"),
        (lambda r: r.rsplit(" ", 1)[0] + " 2", "labels must be 0 or 1"),
        (lambda r: r.replace("|", ";", 1), "three"),
    ])
    def test_bad_row_reports_line(self, tmp_path, mutate, match):
        path = tmp_path / "r.vkds"
        write_dataset(generate(GenSpec(n_samples=3)), path)
        lines = path.read_text().splitlines()
        lines[3] = mutate(lines[3])
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match=match) as err:
            read_dataset(path)
        assert err.value.line == 4

    def test_token_out_of_range(self, tmp_path):
        ds = generate(GenSpec(n_samples=2))
        ds.tokens[1, 0] = 300
        path = tmp_path / "o.vkds"
        write_dataset(ds, path)
        with pytest.raises(DatasetFormatError, match="token out of range") as err:
            read_dataset(path)
        assert err.value.line == 4


class TestSplit:
    def test_partition(self):
        ds = generate(GenSpec(n_samples=101, seed=5))
        ds.image[:, 0] = np.arange(101)
        parts = split(ds, (0.6, 0.2, 0.2), seed=1)
        assert [len(p) for p in parts] == [61, 20, 20]
        ids = np.concatenate([p.image[:, 0] for p in parts])
        assert sorted(ids) == list(range(101))

    def test_everything_to_train(self):
        ds = generate(GenSpec(n_samples=20))
        train, val, test = split(ds, (1.0, 0.0, 0.0), 0)
        assert len(val) == len(test) == 0
        order = np.lexsort(train.image.T)
        assert train.subset(order) == ds.subset(np.lexsort(ds.image.T))

    def test_deterministic(self):
        ds = generate(GenSpec(n_samples=50))
        a, b = split(ds, (0.5, 0.25, 0.25), 3), split(ds, (0.5, 0.25, 0.25), 3)
        assert all(x == y for x, y in zip(a, b))
        c = split(ds, (0.5, 0.25, 0.25), 4)
        assert not a[0] == c[0]

    @pytest.mark.parametrize("fractions", [(0.5, 0.5), (0.5, 0.6, -0.1), (0.3, 0.3, 0.3)])
    def test_invalid(self, fractions):
        with pytest.raises(ValueError):
            split(generate(GenSpec(n_samples=10)), fractions, 0)


def test_dataset_rejects_ragged_rows():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros((2, 4)), np.zeros((3, 1)), 5)
