import dataclasses
import io

import numpy as np
import pytest
import torch

from drnet.analysis import (
    HISTOGRAM_BINS,
    attention_rollout,
    cnn_feature_maps,
    export_rule_embeddings,
    feature_maps_to_images,
    predict_problems,
    rollout_matrices,
    saliency_to_image,
    stream_similarity,
    write_pgm,
    write_similarity_csv,
)
from drnet.config import ModelConfig, preset
from drnet.data import MiniRpmDataset, MiniRpmSpec, RpmProblem
from drnet.errors import ConfigurationError, FormatError
from drnet.model import DRNet


def _dataset(n=6, size=32, seed=3):
    spec = MiniRpmSpec(n_samples=n, seed=seed, image_size=size)
    return MiniRpmDataset(spec, 0, n, "train")


class TestEmbeddingExport:
    def test_header_and_row_shape(self, micro_model, tmp_path):
        data = _dataset(5)
        path = tmp_path / "emb.csv"
        n = export_rule_embeddings(micro_model, data, path, batch_size=2)
        assert n == 5
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 6
        header = lines[0].split(",")
        assert header[:2] == ["id", "rule"]
        assert header[2] == "e0" and header[-1] == "e1023"
        assert len(header) == 1026
        for i, line in enumerate(lines[1:]):
            cells = line.split(",")
            assert cells[0] == str(i)
            assert "=" in cells[1]  # canonical rule label
            np.array([float(v) for v in cells[2:]])  # parse all 1024 values

    def test_deterministic_reexport(self, micro_model):
        data = _dataset(4)
        a, b = io.StringIO(), io.StringIO()
        export_rule_embeddings(micro_model, data, a)
        export_rule_embeddings(micro_model, data, b)
        assert a.getvalue() == b.getvalue()

    def test_missing_rule_metadata_is_an_error(self, micro_model):
        data = _dataset(3)
        problems = [data[i] for i in range(3)]
        problems[1] = RpmProblem(
            panels=problems[1].panels, target=problems[1].target, rules=()
        )
        with pytest.raises(FormatError, match="problem 1"):
            export_rule_embeddings(micro_model, problems, io.StringIO())

    def test_rows_use_correct_candidate_embedding(self, micro_model):
        data = _dataset(2)
        sink = io.StringIO()
        export_rule_embeddings(micro_model, data, sink)
        micro_model.eval()
        with torch.no_grad():
            panels = np.stack([data[i].panels for i in range(2)])
            x = torch.from_numpy(panels).unsqueeze(2).float() / 255.0
            emb = micro_model.rule_embeddings(x)
        row = sink.getvalue().strip().splitlines()[1].split(",")
        got = np.array([float(v) for v in row[2:]])
        want = emb[0, data[0].target].numpy()
        assert np.allclose(got, want, atol=1e-6)


class TestStreamSimilarity:
    def test_values_in_range_and_counts(self, micro_model):
        data = _dataset(4)
        report = stream_similarity(micro_model, data, batch_size=3)
        assert report.values.size + report.skipped == 4 * 16
        assert np.all(report.values >= -1.0) and np.all(report.values <= 1.0)
        assert report.histogram.sum() == report.values.size
        assert len(report.histogram) == HISTOGRAM_BINS
        assert report.bin_edges[0] == -1.0 and report.bin_edges[-1] == 1.0
        assert -1.0 <= report.mean <= 1.0
        assert -1.0 <= report.median <= 1.0

    def test_zero_norm_panels_are_skipped(self, micro_model):
        with torch.no_grad():
            for p in micro_model.cnn.parameters():
                p.zero_()
        data = _dataset(2)
        report = stream_similarity(micro_model, data)
        assert report.skipped == 2 * 16
        assert report.values.size == 0
        assert np.isnan(report.mean)

    def test_single_stream_model_rejected(self):
        cfg = dataclasses.replace(preset("micro"), enable_vit=False)
        torch.manual_seed(0)
        model = DRNet(cfg)
        with pytest.raises(ConfigurationError, match="both streams"):
            stream_similarity(model, _dataset(1))

    def test_csv_layout(self, micro_model, tmp_path):
        report = stream_similarity(micro_model, _dataset(2))
        path = tmp_path / "sim.csv"
        write_similarity_csv(report, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count"
        assert len(lines) == 1 + HISTOGRAM_BINS
        counts = [int(line.split(",")[2]) for line in lines[1:]]
        assert sum(counts) == report.values.size


class TestRollout:
    def _random_attention(self, n=2, depth=3, heads=4, t=16, seed=0):
        gen = torch.Generator().manual_seed(seed)
        logits = torch.randn(n, depth, heads, t, t, generator=gen)
        return torch.softmax(logits, dim=-1)

    def test_rows_are_stochastic(self):
        rollout = rollout_matrices(self._random_attention())
        assert rollout.shape == (2, 16, 16)
        sums = rollout.sum(axis=2)
        assert np.allclose(sums, 1.0, atol=1e-5)
        assert np.all(rollout >= 0)

    def test_single_layer_equals_normalized_mixed_map(self):
        attention = self._random_attention(n=1, depth=3)
        rollout = rollout_matrices(attention, layer=1)
        mixed = attention[0, 1].mean(dim=0).numpy() + np.eye(16)
        mixed = mixed / mixed.sum(axis=1, keepdims=True)
        assert np.allclose(rollout[0], mixed, atol=1e-12)

    def test_depth_one_rollout_equals_its_only_layer(self):
        attention = self._random_attention(depth=1)
        assert np.allclose(
            rollout_matrices(attention),
            rollout_matrices(attention, layer=0),
            atol=1e-12,
        )

    def test_layer_out_of_range(self):
        with pytest.raises(ConfigurationError, match="layer 3"):
            rollout_matrices(self._random_attention(depth=3), layer=3)

    def test_model_rollout_shape_and_rows(self, micro_model):
        data = _dataset(1)
        panels = torch.from_numpy(data[0].panels[:4]).unsqueeze(1).float() / 255
        saliency = attention_rollout(micro_model, panels)
        assert saliency.shape == (4, 4, 4)  # 32px / 8px patches -> 4x4 grid
        # each map sums to 1: rows of a stochastic matrix averaged
        assert np.allclose(saliency.reshape(4, -1).sum(axis=1), 1.0, atol=1e-5)

    def test_rollout_requires_vit(self):
        cfg = dataclasses.replace(preset("micro"), enable_vit=False)
        torch.manual_seed(0)
        model = DRNet(cfg)
        with pytest.raises(ConfigurationError, match="vit"):
            attention_rollout(model, torch.rand(1, 1, 32, 32))


class TestImages:
    def test_saliency_upsample_is_nearest(self):
        saliency = np.array([[0.0, 1.0], [0.5, 0.25]])
        img = saliency_to_image(saliency, 4)
        assert img.shape == (4, 4)
        assert img.dtype == np.uint8
        assert img[0, 0] == 0 and img[0, 1] == 0
        assert img[0, 2] == 255 and img[1, 3] == 255
        assert img[2, 0] == 128 and img[3, 1] == 128  # 0.5 -> rint(127.5)
        assert img[2, 2] == 64

    def test_saliency_degenerate_map_is_black(self):
        img = saliency_to_image(np.full((2, 2), 0.7), 8)
        assert np.all(img == 0)

    def test_saliency_size_must_be_multiple(self):
        with pytest.raises(ConfigurationError, match="multiple"):
            saliency_to_image(np.zeros((3, 3)), 8)

    def test_feature_maps_shapes_and_names(self, micro_model):
        panel = torch.rand(1, 1, 32, 32, generator=torch.Generator().manual_seed(0))
        maps = cnn_feature_maps(micro_model, panel, "cnn.block1.conv1")
        assert maps.shape == (8, 16, 16)  # stride-2 conv on 32px input

    def test_feature_maps_unknown_layer_lists_choices(self, micro_model):
        panel = torch.rand(1, 1, 32, 32)
        with pytest.raises(ConfigurationError, match="cnn.block1.conv1"):
            cnn_feature_maps(micro_model, panel, "cnn.block9.conv1")

    def test_feature_maps_zero_input_zero_bias(self, micro_model):
        with torch.no_grad():
            micro_model.cnn.block1.conv1.bias.zero_()
        maps = cnn_feature_maps(
            micro_model, torch.zeros(1, 1, 32, 32), "cnn.block1.conv1"
        )
        assert np.all(maps == 0)
        images = feature_maps_to_images(maps)
        assert np.all(images == 0)

    def test_feature_map_normalization_hits_255(self, micro_model):
        panel = torch.rand(1, 1, 32, 32, generator=torch.Generator().manual_seed(1))
        maps = cnn_feature_maps(micro_model, panel, "cnn.block1.conv1")
        images = feature_maps_to_images(maps)
        assert images.dtype == np.uint8
        for c in range(images.shape[0]):
            if maps[c].max() > maps[c].min():
                assert images[c].max() == 255
                assert images[c].min() == 0

    def test_pgm_bytes(self, tmp_path):
        image = np.arange(6, dtype=np.uint8).reshape(2, 3)
        path = tmp_path / "x.pgm"
        write_pgm(path, image)
        blob = path.read_bytes()
        assert blob == b"P5\n3 2\n255\n" + bytes(range(6))

    def test_pgm_rejects_bad_input(self, tmp_path):
        with pytest.raises(ConfigurationError):
            write_pgm(tmp_path / "y.pgm", np.zeros((2, 2), dtype=np.float32))


class TestPredictProblems:
    def test_matches_model_predict(self, micro_model):
        data = _dataset(3)
        problems = [data[i] for i in range(3)]
        out = predict_problems(micro_model, problems)
        micro_model.eval()
        with torch.no_grad():
            panels = np.stack([p.panels for p in problems])
            x = torch.from_numpy(panels).unsqueeze(2).float() / 255.0
            want = micro_model.predict(x).numpy()
        assert np.array_equal(out, want)
