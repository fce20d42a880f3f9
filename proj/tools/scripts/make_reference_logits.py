#!/usr/bin/env python3
"""Write reference final-position logits for GPT-2 small on 20 fixed prompts.

Usage: make_reference_logits.py <gpt2_dir> [out.json]

<gpt2_dir> is a Hugging Face GPT-2 checkpoint directory (config.json,
model.safetensors, vocab.json, merges.txt). Output defaults to
<gpt2_dir>/reference_logits.json, where the acceptance binary looks for it.
Requires torch and transformers. GPT-2 uses the tanh GELU ("gelu_new"), the
same variant stagescope implements, so no activation adjustment is needed.
"""

import json
import sys
from pathlib import Path

PROMPTS = [
    "The capital of France is",
    "Once upon a time, there was a",
    "import numpy as np\nimport",
    "The quick brown fox jumps over the",
    "In 1969, Neil Armstrong became the first person to",
    "She opened the door and saw",
    "The mitochondria is the powerhouse of the",
    "def fibonacci(n):\n    if n <",
    "To be or not to be, that is the",
    "The stock market fell sharply on Monday after",
    "Water boils at 100 degrees",
    "My favourite programming language is",
    "The results of the experiment suggest that",
    "He was running late, so he started",
    "1, 2, 3, 4, 5,",
    "The United Nations was founded in",
    "Photosynthesis converts sunlight into",
    "Dear Sir or Madam, I am writing to",
    "The Eiffel Tower is located in",
    "Thank you very much for your",
]


def main() -> None:
    if len(sys.argv) not in (2, 3):
        sys.exit(__doc__)
    import torch
    from transformers import GPT2LMHeadModel, GPT2TokenizerFast

    model_dir = Path(sys.argv[1])
    out = Path(sys.argv[2]) if len(sys.argv) == 3 else model_dir / "reference_logits.json"
    tokenizer = GPT2TokenizerFast.from_pretrained(model_dir)
    model = GPT2LMHeadModel.from_pretrained(model_dir, torch_dtype=torch.float32).eval()

    records = []
    with torch.no_grad():
        for text in PROMPTS:
            ids = tokenizer(text)["input_ids"]
            logits = model(torch.tensor([ids])).logits[0, -1].double().tolist()
            records.append({"text": text, "token_ids": ids, "final_logits": logits})

    out.write_text(json.dumps({"model": str(model_dir), "prompts": records}))
    print(f"wrote {len(records)} prompts to {out}")


if __name__ == "__main__":
    main()
