#!/usr/bin/env python3
# SPDX-License-Identifier: MIT OR Apache-2.0
"""Reference logits and logit-lens values from Hugging Face `transformers`.

Loads a model directory in the mifin layout (config.json, model.safetensors,
vocab.json, merges.txt) into `GPT2LMHeadModel` and writes a JSON summary that
the Rust test-suite compares against:

    python3 scripts/reference_oracle.py MODEL_DIR PROMPTS.txt OUT.json [PROBE_STRIDE]

For every prompt the summary holds the token ids, final-position logits of a
fixed probe set of ids plus the top-20, per-layer lens logits at the final
position for the same probe ids (final layernorm applied), and the
(" rise" - " fall") lens trajectory. A probe stride of 1 records every
logit (used for the full-vocabulary comparison against real GPT-2 weights).
"""

import json
import sys

import torch
from safetensors.torch import load_file
from transformers import GPT2Config, GPT2LMHeadModel, GPT2Tokenizer

PROBE_STRIDE = 251


def load(model_dir):
    cfg = json.load(open(f"{model_dir}/config.json"))
    get = lambda *keys: next(cfg[k] for k in keys if k in cfg and cfg[k] is not None)
    config = GPT2Config(
        n_layer=get("n_layers", "n_layer"),
        n_head=get("n_heads", "n_head"),
        n_embd=get("d_model", "n_embd"),
        n_inner=get("d_mlp", "n_inner"),
        vocab_size=cfg["vocab_size"],
        n_positions=get("context_len", "n_positions"),
        layer_norm_epsilon=get("layernorm_eps", "layer_norm_epsilon"),
        activation_function="gelu_new",
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
    )
    model = GPT2LMHeadModel(config)
    raw = load_file(f"{model_dir}/model.safetensors")
    if "unembed.weight" in raw:
        sys.exit("explicit output heads are not representable in GPT2LMHeadModel")
    state = {}
    for k, v in raw.items():
        k = k[len("transformer."):] if k.startswith("transformer.") else k
        state["transformer." + k] = v
    missing, unexpected = model.load_state_dict(state, strict=False)
    missing = [m for m in missing if not m.endswith("attn.bias") and m != "lm_head.weight"]
    assert not missing, missing
    model.tie_weights()
    model.eval()
    tok = GPT2Tokenizer(f"{model_dir}/vocab.json", f"{model_dir}/merges.txt")
    return model, tok


def main():
    model_dir, prompts_path, out_path = sys.argv[1:4]
    stride = int(sys.argv[4]) if len(sys.argv) > 4 else PROBE_STRIDE
    model, tok = load(model_dir)
    prompts = [l.rstrip("\n") for l in open(prompts_path) if l.strip()]
    vocab = model.config.vocab_size
    probes = list(range(0, vocab, stride))
    rise, fall = tok.encode(" rise"), tok.encode(" fall")
    assert len(rise) == len(fall) == 1
    records = []
    for p in prompts:
        ids = tok.encode(p)
        resid = []
        hooks = [
            blk.register_forward_hook(lambda m, i, o: resid.append((o[0] if isinstance(o, tuple) else o)[0, -1].detach().clone()))
            for blk in model.transformer.h
        ]
        with torch.no_grad():
            logits = model(torch.tensor([ids])).logits[0, -1]
            lens = [model.lm_head(model.transformer.ln_f(r)) for r in resid]
        for h in hooks:
            h.remove()
        top = torch.topk(logits, 20)
        records.append(
            {
                "prompt": p,
                "ids": ids,
                "probe_logits": [logits[i].item() for i in probes],
                "top_ids": top.indices.tolist(),
                "top_logits": top.values.tolist(),
                "lens_probe_logits": [[l[i].item() for i in probes] for l in lens],
                "lens_top1": [int(torch.argmax(l)) for l in lens],
                "rise_fall": [(l[rise[0]] - l[fall[0]]).item() for l in lens],
            }
        )
    json.dump({"probe_stride": stride, "records": records}, open(out_path, "w"), indent=1)


if __name__ == "__main__":
    main()
