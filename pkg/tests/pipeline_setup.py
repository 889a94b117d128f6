"""Small pipeline configurations shared by the pipeline, CLI and acceptance tests."""

from polytrans.config import parse_config

SMALL = """
bpe.vocab_size = 128
model.d_model = 32
model.heads = 2
model.d_ff = 64
model.max_positions = 32
model.dropout_rate = 0.0
train.batch_size = 32
train.lr = 1e-3
train.eval_every = 50
train.patience = 50
decode.beam_size = 4
decode.top_k = 4
decode.max_len = 16
gbdt.n_iter = 2
gbdt.k = 3
backtranslate.beam_size = 2
backtranslate.top_k = 2
"""


def small_config(output_dir, steps=60, **overrides):
    cfg = parse_config(SMALL + f"train.max_steps = {steps}\npaths.output_dir = {output_dir}\n")
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        full = f"{section}.{name}" if name else section
        cfg = parse_config(f"{full} = {value}\n", cfg)
    return cfg.validate()
