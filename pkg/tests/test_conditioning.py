import json

import numpy as np
import pytest

from moeflow.conditioning import (
    NULL_PROMPT_ID,
    ConfigError,
    EncoderStubConfig,
    PromptEncoder,
    encode_prompt,
    load_prompt_table,
    make_projections,
    null_condition,
    pseudo_normal,
)


def test_deterministic_bit_identical():
    cfg = EncoderStubConfig()
    a = encode_prompt(7, cfg, make_projections(cfg))
    b = encode_prompt(7, cfg, make_projections(cfg))
    assert a.pooled.tobytes() == b.pooled.tobytes()
    assert a.sequence.tobytes() == b.sequence.tobytes()


def test_sequence_length_is_token_sum():
    cfg = EncoderStubConfig(M_t5=4, M_llm=6)
    b = encode_prompt(3, cfg, make_projections(cfg))
    assert b.sequence.shape == (10, cfg.d)
    assert abs(np.linalg.norm(b.pooled) - 1) < 1e-12
    assert np.isfinite(b.sequence).all()


@pytest.mark.parametrize("field,value", [("d", 48), ("M_t5", 3), ("M_llm", 5), ("L", 3), ("d_t5", 7), ("d_llm", 9)])
def test_shape_arithmetic_per_dimension(field, value):
    cfg = EncoderStubConfig(**{field: value})
    b = encode_prompt(1, cfg, make_projections(cfg))
    assert b.sequence.shape == (cfg.M_t5 + cfg.M_llm, cfg.d)
    assert b.pooled.shape == (cfg.d,)


def test_distinct_prompts_near_orthogonal():
    cfg = EncoderStubConfig(d=64)
    proj = make_projections(cfg)
    cos = []
    for i in range(100):
        a = encode_prompt(2 * i + 1, cfg, proj).sequence.ravel()
        b = encode_prompt(2 * i + 2, cfg, proj).sequence.ravel()
        cos.append(a @ b / np.linalg.norm(a) / np.linalg.norm(b))
    assert abs(np.mean(cos)) < 0.1


def test_pseudo_normal_moments():
    z = pseudo_normal((200_000,), 1, 2, 3)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1) < 0.01


def test_null_condition():
    cfg = EncoderStubConfig()
    n = null_condition(cfg)
    b = encode_prompt(5, cfg, make_projections(cfg))
    assert np.linalg.norm(n.pooled) == 0 and not n.sequence.any()
    assert n.pooled.shape == b.pooled.shape and n.sequence.shape == b.sequence.shape
    assert n.prompt_id == NULL_PROMPT_ID


def test_encoder_maps_zero_to_null_and_batches():
    enc = PromptEncoder(EncoderStubConfig())
    assert not enc(0).pooled.any()
    b = enc.batch([1, 0, 2])
    assert b.pooled.shape == (3, 64) and b.sequence.shape == (3, 8, 64)
    assert not b.sequence[1].any()


def test_zero_dims_rejected():
    with pytest.raises(ConfigError):
        EncoderStubConfig(M_t5=0)


def test_projection_shape_checked():
    cfg = EncoderStubConfig()
    proj = make_projections(cfg)
    proj["t5"] = proj["t5"][:-1]
    with pytest.raises(ConfigError):
        encode_prompt(1, cfg, proj)


def test_prompt_table(tmp_path):
    p = tmp_path / "prompts.json"
    p.write_text(json.dumps({"1": "a red square", "2": "a disc"}))
    assert load_prompt_table(p) == {1: "a red square", 2: "a disc"}
