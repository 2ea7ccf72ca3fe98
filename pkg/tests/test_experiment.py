import json

from vscd.experiment import VARIANTS, DeskConfig, run_seeds
from vscd.synthdata import GenConfig

GEN = GenConfig(layouts=3, scenes=2, frame_size=32, length_range=(4, 6), change_bins=[(2, 4)],
                change_proportions=[1.0], test_layouts=1, static_range=(1, 2))
MODEL = {"encoder": {"frame_size": 32, "token_dim": 16, "at_heads": 4, "vit_depth": 1}, "k": 3,
         "change_ch": 8, "decoder_widths": [8, 8, 8], "rgb_ch": 4}


def test_run_seeds_scores_and_resumes(tmp_path):
    cfg = DeskConfig(epochs=1, T_key=4, model=MODEL)
    cache = tmp_path / "results.json"
    first = run_seeds([0], tmp_path, ["full"], cfg, cache, GEN)
    r = first[0]
    assert (r["train_pairs"], r["test_pairs"]) == (4, 2)
    for v in (r["baseline"], r["untrained"], r["variants"]["full"]["test_f1"]):
        assert 0.0 <= v <= 1.0
    assert r["variants"]["full"]["train_cpu_seconds"] > 0

    # a second call trains only the missing variant and keeps the stored one
    stored = json.loads(cache.read_text())
    stored["0"]["result"]["variants"]["full"]["test_f1"] = -1.0
    cache.write_text(json.dumps(stored))
    second = run_seeds([0], tmp_path, ["full", "no_cf"], cfg, cache, GEN)
    assert second[0]["variants"]["full"]["test_f1"] == -1.0
    assert set(second[0]["variants"]) == {"full", "no_cf"}

    # changed settings invalidate the cache
    third = run_seeds([0], tmp_path, ["full"], DeskConfig(epochs=0, T_key=4, model=MODEL), cache, GEN)
    assert third[0]["variants"]["full"]["test_f1"] != -1.0


def test_variants_cover_every_ablation():
    assert set(VARIANTS) == {"full", "no_at", "no_csp", "no_cf", "no_cf_csp"}
    assert VARIANTS["no_cf_csp"] == {"use_cf": False, "use_csp": False}
