import numpy as np
import pytest

_RESULTS: list[tuple[str, bool, str]] = []


class _Criterion:
    def __init__(self, name):
        self.name = name

    def check(self, ok: bool, detail: str = ""):
        _RESULTS.append((self.name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {self.name}: {detail}")
        assert ok, f"{self.name}: {detail}"


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion."""
    return _Criterion(request.node.name)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


PART_MEANS = {  # (mu_x, sigma_x, mu_y, sigma_y) in 150-px frame, right-facing
    "eye": (78.0, 44 / 3, 63.0, 34 / 3),
    "beak": (120.0, 8.0, 75.0, 6.0),
    "forehead": (70.0, 10.0, 35.0, 7.0),
    "crown": (55.0, 12.0, 20.0, 5.0),
}


def write_head_dataset(out_dir, pairs, seed=0, train_pairs=None, middle=0, size=96):
    """Mirrored head pairs with part points drawn from PART_MEANS.

    Each right head (only the right eye visible) is followed by its flipped
    twin.  The first ``train_pairs`` pairs are training entries.
    """
    import json
    from pathlib import Path

    from lcsc.imageio import flip_horizontal, save_ppm
    from lcsc.synthetic import head_image

    out_dir = Path(out_dir)
    (out_dir / "heads").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    train_pairs = pairs if train_pairs is None else train_pairs
    lines = []
    for p in range(pairs):
        right = head_image(rng, size)
        split = "train" if p < train_pairs else "test"
        ratios = {k: (rng.normal(mx, sx) / 150, rng.normal(my, sy) / 150)
                  for k, (mx, sx, my, sy) in PART_MEANS.items()}
        for side, img in (("right", right), ("left", flip_horizontal(right))):
            rel = f"heads/{p:04d}_{side}.ppm"
            save_ppm(img, out_dir / rel)
            pts = {k: [(rx if side == "right" else 1 - rx) * size, ry * size]
                   for k, (rx, ry) in ratios.items()}
            lines.append({"image_path": rel, "label": p % 3, "split": split,
                          "head_bbox": [0, 0, size, size], "part_points": pts,
                          "eye_visibility": {"left": side == "left", "right": side == "right"}})
    for m in range(middle):
        rel = f"heads/middle_{m:03d}.ppm"
        save_ppm(head_image(rng, size), out_dir / rel)
        lines.append({"image_path": rel, "label": 0, "split": "train",
                      "head_bbox": [0, 0, size, size], "direction": "middle",
                      "part_points": {"eye": [40, 40]}})
    manifest = out_dir / "heads.jsonl"
    manifest.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in lines))
    return manifest


@pytest.fixture(scope="session")
def texture_manifest(tmp_path_factory):
    """Small 3-class oriented-texture dataset: 4 train / 4 test per class, 64 px."""
    from lcsc.synthetic import write_texture_dataset

    return write_texture_dataset(tmp_path_factory.mktemp("tex"), seed=5, per_class_train=4,
                                 per_class_test=4, n_classes=3, size=64)
