import numpy as np
import pytest
import torch

from blto.augment import victim_pipeline
from blto.data import LabeledImageSet, make_synthetic_set
from blto.evaluation import (
    CentroidTable,
    MetricsRecord,
    build_monitor_context,
    compute_asr,
    compute_ba,
    export_embeddings,
    featurize,
    knn_predict,
    monitor_epoch,
    normalized_similarity,
    normalized_similarity_from_centroids,
    read_metrics,
    write_metrics,
)
from blto.models import EncoderStack, init_encoder

NORM = ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))


def knn_oracle(memory, labels, queries, k, tau, n_classes):
    # Exhaustive search: rank all memory points per query, vote with
    # exp(cos/tau) weights.
    def unit(x):
        return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)

    mem, qs = unit(memory.astype(np.float64)), unit(queries.astype(np.float64))
    preds = []
    for q in qs:
        sims = mem @ q
        order = np.argsort(-sims)[:k]
        scores = np.zeros(n_classes)
        for j in order:
            scores[labels[j]] += np.exp(sims[j] / tau)
        preds.append(int(scores.argmax()))
    return np.asarray(preds)


class _ColorMeanBackbone(torch.nn.Module):
    """Maps an image to its per-channel mean; lets tests dictate embeddings."""

    def forward(self, x):
        return x.mean(dim=(2, 3))


def stub_stack() -> EncoderStack:
    stack = init_encoder("tiny-conv", 3, seed=0)
    stack.backbone = _ColorMeanBackbone()
    stack.embed_dim = 3
    return stack


def color_image(rgb, size=8):
    img = np.zeros((3, size, size), dtype=np.float32)
    for c, v in enumerate(rgb):
        img[c] = v
    return img


def color_set(rgbs, labels, names, split="train"):
    images = np.stack([color_image(c) for c in rgbs])
    return LabeledImageSet(images, np.asarray(labels, dtype=np.int64), names, split_tag=split)


class TestKnnPredict:
    def test_exact_match_k1(self):
        mem = np.eye(4, dtype=np.float32)
        labels = np.array([0, 1, 2, 3])
        preds = knn_predict(mem, labels, mem[2:3], k=1)
        assert preds.tolist() == [2]

    def test_single_class_memory(self):
        rng = np.random.default_rng(0)
        mem = rng.normal(size=(10, 5))
        labels = np.full(10, 3)
        preds = knn_predict(mem, labels, rng.normal(size=(6, 5)), k=4, num_classes=5)
        assert np.all(preds == 3)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(7)
        mem = rng.normal(size=(50, 8))
        labels = rng.integers(0, 4, size=50)
        queries = rng.normal(size=(20, 8))
        ours = knn_predict(mem, labels, queries, k=5, temperature=0.1, num_classes=4)
        oracle = knn_oracle(mem, labels, queries, k=5, tau=0.1, n_classes=4)
        assert np.array_equal(ours, oracle)

    @pytest.mark.filterwarnings("ignore:k=200 larger")
    @pytest.mark.parametrize("size", [10, 37, 100])
    def test_oracle_equality_across_memory_sizes(self, size):
        rng = np.random.default_rng(size)
        mem = rng.normal(size=(size, 6))
        labels = rng.integers(0, 3, size=size)
        queries = rng.normal(size=(11, 6))
        k = min(size, 200)
        assert np.array_equal(
            knn_predict(mem, labels, queries, k=200, temperature=0.1, num_classes=3),
            knn_oracle(mem, labels, queries, k=k, tau=0.1, n_classes=3),
        )

    def test_oversize_k_clamped_with_warning(self):
        mem = np.eye(3, dtype=np.float32)
        with pytest.warns(UserWarning, match="clamping"):
            knn_predict(mem, np.array([0, 1, 2]), mem, k=10)

    def test_empty_memory_rejected(self):
        with pytest.raises(ValueError):
            knn_predict(np.zeros((0, 3)), np.zeros(0, dtype=int), np.ones((1, 3)))


class TestBaAsr:
    def _memory(self):
        # Three well-separated color clusters.
        rgbs = [(0.9, 0.1, 0.1)] * 4 + [(0.1, 0.9, 0.1)] * 4 + [(0.1, 0.1, 0.9)] * 4
        return color_set(rgbs, [0] * 4 + [1] * 4 + [2] * 4, ["r", "g", "b"])

    def test_ba_perfect_on_cluster_centers(self):
        memory = self._memory()
        test = color_set([(0.9, 0.1, 0.1), (0.1, 0.9, 0.1)], [0, 1], ["r", "g", "b"], "test")
        assert compute_ba(stub_stack(), test, memory, NORM, k=3) == 1.0

    def test_asr_all_target(self):
        memory = self._memory()
        triggered = np.stack([color_image((0.1, 0.1, 0.9))] * 5)
        true_labels = np.array([0, 0, 1, 1, 2])
        asr = compute_asr(stub_stack(), triggered, true_labels, memory, 2, NORM, k=3)
        assert asr == 1.0

    def test_asr_none_target(self):
        memory = self._memory()
        triggered = np.stack([color_image((0.9, 0.1, 0.1))] * 4)
        true_labels = np.array([0, 0, 1, 1])
        asr = compute_asr(stub_stack(), triggered, true_labels, memory, 2, NORM, k=3)
        assert asr == 0.0

    def test_asr_mixed_counts(self):
        # 20 non-target inputs, exactly 7 softened into the target cluster.
        memory = self._memory()
        rgbs = [(0.1, 0.1, 0.9)] * 7 + [(0.9, 0.1, 0.1)] * 13
        triggered = np.stack([color_image(c) for c in rgbs])
        true_labels = np.zeros(20, dtype=np.int64)
        asr = compute_asr(stub_stack(), triggered, true_labels, memory, 2, NORM, k=3)
        assert asr == pytest.approx(0.35)

    def test_exclusion_convention(self):
        # Target-class inputs predicted as target inflate only the inclusive rate.
        memory = self._memory()
        rgbs = [(0.1, 0.1, 0.9)] * 2 + [(0.9, 0.1, 0.1)] * 2
        triggered = np.stack([color_image(c) for c in rgbs])
        true_labels = np.array([2, 2, 0, 0])
        excl = compute_asr(stub_stack(), triggered, true_labels, memory, 2, NORM, k=3)
        incl = compute_asr(
            stub_stack(), triggered, true_labels, memory, 2, NORM, k=3, exclude_target_class=False
        )
        assert excl == 0.0
        assert incl == pytest.approx(0.5)

    def test_empty_test_set_rejected(self):
        memory = self._memory()
        empty = LabeledImageSet(np.zeros((0, 3, 8, 8), dtype=np.float32), np.zeros(0, dtype=np.int64), ["r", "g", "b"], split_tag="test")
        with pytest.raises(ValueError):
            compute_ba(stub_stack(), empty, memory, NORM)


class TestNormalizedSimilarity:
    def test_equal_similarities_give_one(self):
        rng = np.random.default_rng(0)
        bd = rng.normal(size=8)
        table = CentroidTable(np.stack([bd] * 10), bd, target_class=3)
        assert normalized_similarity_from_centroids(table) == pytest.approx(1.0)

    def test_orthonormal_centroids_give_class_count(self):
        centroids = np.eye(10)
        table = CentroidTable(centroids, centroids[4].copy(), target_class=4)
        assert normalized_similarity_from_centroids(table) == pytest.approx(10.0, abs=1e-6)

    def test_matches_independent_formula(self):
        def oracle(table):
            def cos(a, b):
                return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

            sims = [cos(table.backdoor_centroid, c) for c in table.class_centroids]
            return cos(table.backdoor_centroid, table.class_centroids[table.target_class]) / (
                sum(sims) / len(sims)
            )

        rng = np.random.default_rng(3)
        table = CentroidTable(rng.normal(size=(6, 12)), rng.normal(size=12), target_class=2)
        ours = normalized_similarity_from_centroids(table)
        assert ours == pytest.approx(oracle(table), abs=1e-9)

    def test_invariant_under_orthogonal_transform(self):
        rng = np.random.default_rng(4)
        centroids = rng.normal(size=(5, 7))
        bd = rng.normal(size=7)
        q, _ = np.linalg.qr(rng.normal(size=(7, 7)))
        before = normalized_similarity_from_centroids(CentroidTable(centroids, bd, 1))
        after = normalized_similarity_from_centroids(CentroidTable(centroids @ q, bd @ q, 1))
        assert before == pytest.approx(after, abs=1e-9)

    def test_stack_wrapper(self):
        rgbs = [(0.9, 0.1, 0.1)] * 3 + [(0.1, 0.9, 0.1)] * 3
        train = color_set(rgbs, [0] * 3 + [1] * 3, ["r", "g"])
        triggered = np.stack([color_image((0.1, 0.9, 0.1))] * 4)
        s_n = normalized_similarity(stub_stack(), train, triggered, 1, NORM)
        assert s_n > 1.0

    def test_zero_centroid_rejected(self):
        table = CentroidTable(np.eye(3), np.zeros(3), 0)
        with pytest.raises(ValueError, match="zero norm"):
            normalized_similarity_from_centroids(table)


@pytest.fixture(scope="module")
def ctx():
    train = make_synthetic_set(3, 12, 16, seed=1)
    test = make_synthetic_set(3, 6, 16, seed=2, split_tag="test")
    return build_monitor_context(
        train, test, trigger_fn=lambda x: x, target=0,
        victim_aug=victim_pipeline(16, mean=NORM[0], std=NORM[1]),
        norm=NORM, knn_k=5, monitor_cap=24,
    )


class TestMonitor:
    def test_fresh_encoder_record_finite(self, ctx):
        stack = init_encoder("tiny-conv", 16, seed=0)
        rec = monitor_epoch(stack, ctx, epoch=0)
        for name in ("ba", "asr", "asr_all", "s_n", "alignment", "uniformity"):
            assert np.isfinite(getattr(rec, name)), name

    def test_ba_matches_compute_ba_bit_exactly(self, ctx):
        stack = init_encoder("tiny-conv", 16, seed=0)
        rec = monitor_epoch(stack, ctx, epoch=0)
        direct = compute_ba(stack, ctx.clean_test, ctx.memory, NORM, k=5)
        assert rec.ba == direct

    def test_asr_plus_non_target_fraction_is_one(self, ctx):
        stack = init_encoder("tiny-conv", 16, seed=0)
        mem_feats = featurize(stack, ctx.memory.images, NORM)
        preds = knn_predict(
            mem_feats, ctx.memory.labels,
            featurize(stack, ctx.triggered_test_images, NORM),
            k=5, num_classes=3,
        )
        frac_target = float((preds == 0).mean())
        frac_other = float((preds != 0).mean())
        assert frac_target + frac_other == 1.0

    def test_deterministic_across_calls(self, ctx):
        stack = init_encoder("tiny-conv", 16, seed=0)
        a = monitor_epoch(stack, ctx, epoch=3)
        b = monitor_epoch(stack, ctx, epoch=3)
        assert a == b

    def test_perfectly_backdoored_toy_encoder(self):
        # Triggered images are pinned to the target cluster color, so the
        # stub embeds them exactly at the target centroid.
        rgbs = [(0.9, 0.1, 0.1)] * 4 + [(0.1, 0.9, 0.1)] * 4 + [(0.1, 0.1, 0.9)] * 4
        train = color_set(rgbs, [0] * 4 + [1] * 4 + [2] * 4, ["r", "g", "b"])
        test = color_set(rgbs[:6], [0] * 4 + [1] * 2, ["r", "g", "b"], "test")
        target = 2

        def trigger_fn(images):
            return np.stack([color_image((0.1, 0.1, 0.9))] * images.shape[0])

        ctx = build_monitor_context(
            train, test, trigger_fn, target,
            victim_aug=victim_pipeline(8, mean=NORM[0], std=NORM[1]),
            norm=NORM, knn_k=3,
        )
        rec = monitor_epoch(stub_stack(), ctx, epoch=0)
        assert rec.asr == 1.0
        table_sims = []
        feats = featurize(stub_stack(), ctx.sn_triggered_images, NORM)
        bd = feats.mean(axis=0)
        for c in range(3):
            idx = np.flatnonzero(train.labels == c)
            centroid = featurize(stub_stack(), train.images[idx], NORM).mean(axis=0)
            table_sims.append(bd @ centroid / (np.linalg.norm(bd) * np.linalg.norm(centroid)))
        assert np.argmax(table_sims) == target  # S_N numerator is the max class similarity
        assert rec.s_n > 1.0


class TestLedger:
    def test_round_trip(self, tmp_path):
        records = [
            MetricsRecord(0, 0.5, 0.1, 0.2, 1.0, 0.3, -2.0, 1.5),
            MetricsRecord(1, 0.6, 0.2, 0.3, 1.5, 0.2, -2.5, 1.2),
        ]
        path = write_metrics(records, tmp_path / "metrics.csv", "run-a", "hash-b")
        assert read_metrics(path) == records
        header = path.read_text().splitlines()[0]
        assert header.endswith("run_id,config_hash")


class TestExportEmbeddings:
    def test_rows_and_pca(self, tmp_path):
        clean = make_synthetic_set(2, 8, 16, seed=0)
        triggered = clean.images[:5]
        stack = init_encoder("tiny-conv", 8, seed=0)
        path = export_embeddings(
            stack, clean, triggered, clean.labels[:5], tmp_path / "emb.csv", NORM
        )
        lines = path.read_text().splitlines()
        assert len(lines) == 1 + len(clean) + 5

        body = np.array([line.split(",")[3:] for line in lines[1:]], dtype=np.float64)
        pca = body[:, -2:]
        assert np.abs(pca.mean(axis=0)).max() <= 1e-6

    def test_deterministic_bytes(self, tmp_path):
        clean = make_synthetic_set(2, 6, 16, seed=0)
        stack = init_encoder("tiny-conv", 8, seed=0)
        a = export_embeddings(stack, clean, clean.images[:2], clean.labels[:2], tmp_path / "a.csv", NORM)
        b = export_embeddings(stack, clean, clean.images[:2], clean.labels[:2], tmp_path / "b.csv", NORM)
        assert a.read_bytes() == b.read_bytes()
