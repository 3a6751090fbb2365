"""Import the compiled extension and exercise each binding once.

Usage: python3 smoke_test.py [path/to/liblesionuq_py.so]
Without an argument the newest build under target/ is used.
"""
import importlib.util
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[3]


def find_library():
    if len(sys.argv) > 1:
        return Path(sys.argv[1])
    found = [p for p in (ROOT / "target").glob("*/liblesionuq_py.so")]
    if not found:
        sys.exit("build first: cargo build -p lesionuq-py")
    return max(found, key=lambda p: p.stat().st_mtime)


def load(lib, tmp):
    # the module must be importable under its own name
    target = Path(tmp) / "lesionuq.so"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("lesionuq", target)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    with tempfile.TemporaryDirectory() as tmp:
        lq = load(find_library(), tmp)

        assert lq.binary_entropy(0.5) == 1.0
        assert lq.pcs_uncertainty(0.5) == 1.0

        dims = (3, 2, 2)
        zeros = lq.Volume(dims, [0.0] * 12)
        ones = lq.Volume(dims, [1.0] * 12)
        maps = lq.compute_maps([zeros, ones])
        assert maps["variance"].tolist() == [0.25] * 12
        assert maps["entropy"].tolist() == [1.0] * 12

        path = os.path.join(tmp, "v.npy")
        maps["mean_prob"].save(path)
        assert lq.Volume.load(path).tolist() == [0.5] * 12

        mask = lq.LabelVolume((4, 4, 4), [1 if i in (0, 21, 63) else 0 for i in range(64)])
        labels, count = lq.connected_components(mask)
        assert count == 2, count

        auc, points = lq.accuracy_confidence([0.9, 0.8, 0.2, 0.1], [False, False, True, True])
        assert auc == 100.0 and points[0][1:] == (1.0, 1.0)
        assert lq.spearman_rho([1, 2, 3], [30, 20, 10]) == -1.0

        cfg = "dims = [32, 32, 32]\nn_true_lesions = 3\nn_false_lesions = 2\nt_samples = 6\n"
        scene = lq.generate_scene(index=0, seed=1, config=cfg)
        assert len(scene["samples"]) == 6
        m = lq.compute_maps(scene["samples"])
        pred = lq.binarize(m["mean_prob"])
        lesions = lq.extract_lesions(pred, scene["gt"])
        assert lesions and all(0.0 <= l.iou_adj <= 1.0 for l in lesions)
        assert 0.0 < lq.dice(pred, scene["gt"]) <= 1.0

        try:
            lq.Volume((2, 2, 2), [0.0])
        except lq.DataError:
            pass
        else:
            raise AssertionError("shape mismatch not rejected")
        try:
            lq.generate_scene(config="bogus_key = 1")
        except lq.ConfigError:
            pass
        else:
            raise AssertionError("bad config not rejected")

        out = os.path.join(tmp, "run")
        pipeline_cfg = (
            "schema_version = 1\n[synth]\n" + cfg + "n_scenes = 8\n[train]\nepochs = 3\n"
        )
        report = lq.run_pipeline(pipeline_cfg, out)
        assert len(report) == 11, sorted(report)
        assert report["Size"][1] == -1.0
        assert all(0.0 <= auc <= 100.0 for auc, _ in report.values())

        graphs = lq.read_graphs(os.path.join(out, "graphs.jsonl"))
        model = lq.GcnnModel.load(os.path.join(out, "fold_0", "gcnn_classification.model"))
        u = model.predict(graphs[0])
        assert 0.0 <= u <= 1.0 and not math.isnan(u)
        trained = lq.train_gcnn(graphs, epochs=2, seed=0)
        assert trained.variant == "classification"
    print("smoke test passed")


if __name__ == "__main__":
    main()
