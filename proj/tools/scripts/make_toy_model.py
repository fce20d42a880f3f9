#!/usr/bin/env python3
"""Writes a small random GPT-2 checkpoint plus reference activations.

Output directory layout:
  config.json        Hugging Face GPT-2 config
  model.safetensors  GPT-2 tensor naming (wte, wpe, h.{i}.*, ln_f), float32
  reference.json     float64 reference logits / residuals / attention computed
                     by transformers' GPT2 blocks for a few layer schedules

Layer norm parameters are randomized so that weight folding is exercised,
and d_mlp != d_model so that orientation mistakes change shapes."""

import json
import sys

import torch
from safetensors.torch import save_file
from transformers import GPT2Config, GPT2LMHeadModel

SEQUENCES = [
    [1, 5, 9, 2, 33, 7, 7, 60, 12, 0],
    [63, 62, 61, 3, 3, 3, 17, 42],
    [11],
]

# name -> schedule (block order)
SCHEDULES = {
    "identity": [0, 1, 2],
    "drop:1": [0, 2],
    "swap:0": [1, 0, 2],
    "repeat:1+2x1": [0, 1, 1, 2, 2],
    "custom:": [],
}


def main(out_dir):
    torch.manual_seed(1234)
    cfg = GPT2Config(
        vocab_size=64,
        n_positions=32,
        n_embd=16,
        n_layer=3,
        n_head=4,
        n_inner=40,
        activation_function="gelu_new",
        layer_norm_epsilon=1e-5,
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        tie_word_embeddings=True,
        bos_token_id=0,
        eos_token_id=0,
    )
    cfg._attn_implementation = "eager"
    model = GPT2LMHeadModel(cfg)
    with torch.no_grad():
        for name, p in model.transformer.named_parameters():
            if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name == "ln_f.weight":
                p.copy_(1.0 + 0.3 * torch.randn_like(p))
            elif "ln_" in name and name.endswith("bias"):
                p.copy_(0.2 * torch.randn_like(p))
            elif name.endswith("bias"):
                p.copy_(0.1 * torch.randn_like(p))
            else:
                p.copy_(0.3 * torch.randn_like(p))
    model.eval()

    tensors = {k: v.detach().contiguous().float() for k, v in model.transformer.state_dict().items()
               if not k.endswith(".attn.bias") and not k.endswith(".attn.masked_bias")}
    save_file(tensors, f"{out_dir}/model.safetensors", metadata={"format": "pt"})
    cfg.to_json_file(f"{out_dir}/config.json")

    model = model.double()
    tr = model.transformer
    ref = {"sequences": SEQUENCES, "schedules": {}}
    with torch.no_grad():
        # Full model through the library API for the identity schedule.
        full = []
        for seq in SEQUENCES:
            ids = torch.tensor([seq])
            out = model(ids, output_hidden_states=True, output_attentions=True)
            full.append({
                "logits": out.logits[0].tolist(),
                # hidden_states[-1] has ln_f applied; keep pre-norm residuals only
                "residuals": [h[0].tolist() for h in out.hidden_states[:-1]],
                "attention": [a[0].tolist() for a in out.attentions],
            })
        ref["identity_full"] = full

        for name, order in SCHEDULES.items():
            runs = []
            for seq in SEQUENCES:
                ids = torch.tensor([seq])
                pos = torch.arange(len(seq)).unsqueeze(0)
                h = tr.wte(ids) + tr.wpe(pos)
                n = len(seq)
                mask = torch.full((1, 1, n, n), float("-inf"), dtype=torch.float64).triu(1)
                for i in order:
                    out = tr.h[i](h, attention_mask=mask)
                    h = out[0] if isinstance(out, tuple) else out
                logits = model.lm_head(tr.ln_f(h))
                runs.append(logits[0].tolist())
            ref["schedules"][name] = {"order": order, "logits": runs}

    with open(f"{out_dir}/reference.json", "w") as f:
        json.dump(ref, f)


if __name__ == "__main__":
    main(sys.argv[1])
