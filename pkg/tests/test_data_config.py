import json

import numpy as np
import pytest
from pydantic import ValidationError

from streamtrain.config import RunConfig, load_config
from streamtrain.data import init_store, make_synthetic_batch, new_store, synthetic_targets
from streamtrain.memory_model import ModelSpec
from streamtrain.tile_store import Section


@pytest.mark.parametrize("task", ["copy", "reverse"])
def test_batches_deterministic_and_in_range(task):
    a = make_synthetic_batch(task, 11, 50, 17)
    b = make_synthetic_batch(task, 11, 50, 17)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.targets, b.targets)
    assert a.tokens.max() < 17 and a.targets.max() < 17 and a.targets.min() >= 0
    assert np.array_equal(a.targets, synthetic_targets(task, a.tokens, 17))


def test_task_definitions():
    ids = np.array([0, 3, 16])
    assert list(synthetic_targets("copy", ids, 17)) == [1, 4, 0]
    assert list(synthetic_targets("reverse", ids, 17)) == [16, 13, 0]
    with pytest.raises(ValueError):
        make_synthetic_batch("sort", 0, 4, 8)
    with pytest.raises(ValueError):
        make_synthetic_batch("copy", 0, 0, 8)


def test_init_store_zero_head_and_tied():
    spec = ModelSpec(2, 8, 16, 12)
    s = new_store(spec, 0)
    assert not s.weights_f32(spec.head_id).any()
    assert np.all(s.weights_f32(spec.final_norm_id) == 1)
    assert s.weights_f32(0).std() > 0.5
    tied = ModelSpec(2, 8, 16, 12, tied_embeddings=True)
    t = new_store(tied, 0)
    assert t.weights_f32(tied.head_id).any()
    again = init_store(spec, new_store(spec, 5), 0)
    assert np.array_equal(again.backing, s.backing)
    assert not s.view(1, Section.M).any()


def test_config_defaults_and_forbid(tmp_path):
    cfg = RunConfig()
    assert cfg.model.spec().num_layers == 4 and cfg.engine.strict is False
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {"num_layers": 2}, "engine": {"k_ckpt": 2}}))
    assert load_config(p).model.num_layers == 2
    p.write_text(json.dumps({"model": {"layers": 2}}))
    with pytest.raises(ValidationError):
        load_config(p)
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"surprise": 1})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"model": {"num_layers": 2}, "engine": {"k_ckpt": 3}})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"engine": {"scheduler": "fast"}})
