import yaml

from einmemo.experiments import AblationConfig, MechanismConfig, run_ablations, run_mechanism, with_prompt
from einmemo.frozen_model import ToyConfig
from einmemo.training import PromptTrainConfig

from conftest import TINY


def _tiny_cfg():
    return MechanismConfig(
        seed=3, categories=4, per_class=4, test_per_class=2, cell=31,
        toy=ToyConfig(**TINY), prompt=PromptTrainConfig(epochs=2, batch_size=8, pad=3),
    )


def test_run_mechanism_writes_artifacts(tmp_path):
    res = run_mechanism(_tiny_cfg(), tmp_path / "run")
    assert res.digest_before == res.digest_after
    assert len(res.history) == 2 and res.prompt.geometry.pad == 3
    s = res.summary()
    assert s["delta"] == res.prompted.mean - res.baseline.mean
    for name in ("history.csv", "report_baseline.csv", "report_prompted.csv", "folds.png", "summary.csv", "prompt.bin"):
        assert (tmp_path / "run" / name).exists(), name
    cfg = yaml.safe_load((tmp_path / "run" / "config.yaml").read_text())
    assert cfg["prompt"]["pad"] == 3 and cfg["toy"]["canvas_size"] == 64


def test_with_prompt_overrides_only_prompt():
    cfg = with_prompt(MechanismConfig(), epochs=5, variant="Q")
    assert (cfg.prompt.epochs, cfg.prompt.variant, cfg.prompt.pad) == (5, "Q", 15)
    assert cfg.toy == ToyConfig()


def test_run_ablations_tiny(tiny_data, tiny_model, tmp_path):
    train, test = tiny_data
    cfg = AblationConfig(
        variants=("Q", "IL"), pads=(2, 3), grid_k=2, per_class=(4,),
        prompt=PromptTrainConfig(epochs=1, batch_size=8, pad=3),
    )
    res = run_ablations(train, test, tiny_model, cfg, tmp_path)
    assert [r["variant"] for r in res["variants"]] == ["none", "Q", "IL"]
    assert [r["pad"] for r in res["pads"]] == [2, 3]
    assert res["grid"].matrix.shape == (2, 2)
    assert res["per_class"][0]["n"] == 4 * len(train.categories)
    assert "fraction" not in res
    for name in ("variants.csv", "pads.csv", "pads.png", "class_grid.csv", "class_grid.png", "per_class.csv"):
        assert (tmp_path / name).exists(), name
