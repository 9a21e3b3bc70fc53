#!/usr/bin/env python3
"""Latent-swap controllability on the toy corpus.

Trains the overfit recipe (a couple of minutes on one core), then decodes
with one prompt as the text prefix and another prompt's prior latent. The
generated story should use the latent prompt's vocabulary, measured by
ROUGE-1 recall against each type's training stories.
"""

import numpy as np

import storyvae as sv
from storyvae import corpus as cp
from storyvae import evaluation as ev
from storyvae import sampling as sp

pairs = cp.load_corpus(cp.toy_corpus_path())
vocab = cp.fit_vocabulary([p.prompt_text for p in pairs] + [p.story_text for p in pairs], 512)
examples = cp.prepare_corpus(pairs, vocab, max_len=64)

# Louder injection / mean-head init is what lets the latent outweigh the
# literal prefix at this scale; everything else is the standard recipe.
cfg = sv.ModelConfig(d=64, layers=2, encoder_layers=1, heads=2, latent_dim=16,
                     vocab_size=vocab.size, max_seq_len=64,
                     injection_modes=("input",), injection_gain=8.0, latent_head_gain=50.0)
model = sv.StoryVAE.create(cfg, seed=0)
schedule = sv.TrainingSchedule(total_steps=5000, cycle_length=1250, learning_rate=1e-3,
                               batch_size=4, seed=0)
print("training 5000 steps on the 32-pair toy corpus ...")
trainer = sv.Trainer(model, examples, schedule, separator_id=vocab.separator_id)
trainer.train()
print(f"final loss {trainer.metrics[-1]['loss']:.3f}, kl {trainer.metrics[-1]['kl']:.2f}")

stories_by_type = {}
for p in pairs:
    stories_by_type.setdefault(p.label, []).append(p.story_text)
reference = {label: " ".join(texts) for label, texts in stories_by_type.items()}

sampler = sv.SamplerConfig(top_k=100, top_p=0.9, temperature=0.9, max_new_tokens=32, seed=0)
for label_a, label_b in (("ember", "tide"), ("grove", "frost")):
    x_a, x_b = vocab.encode(f"{label_a} tale"), vocab.encode(f"{label_b} tale")
    direct, _ = sp.generate_for_prompt(model, x_a, vocab.separator_id, sampler)
    swapped, _ = sp.control_generate(model, x_a, x_b, vocab.separator_id, sampler)
    text = vocab.decode(swapped)
    recall_a = ev.rouge_scores(text, reference[label_a], 1).recall
    recall_b = ev.rouge_scores(text, reference[label_b], 1).recall
    print(f"\nprefix {label_a!r}, latent {label_b!r}:")
    print(f"  direct : {vocab.decode(direct)}")
    print(f"  swapped: {text}")
    print(f"  recall vs {label_b} stories {recall_b:.3f}  vs {label_a} stories {recall_a:.3f}"
          f"  -> latent {'wins' if recall_b > recall_a else 'loses'}")
