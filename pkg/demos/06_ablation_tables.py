"""Branch and design ablation tables on a small dataset.

Trains each variant with the same seed and prints the two tables: which
similarity branches matter, and which pieces of the mining branch matter.
Takes a couple of CPU minutes.
"""

from fpmine import EncoderConfig, TrainConfig, ablation_suite, generate_synthetic_dataset

config = EncoderConfig(max_words=16)
dataset = generate_synthetic_dataset(
    seed=0, identity_count=40, samples_per_identity=8, config=config,
    attribute_count=12, detail_count=2, hard_negative_fraction=0.3,
    strong_token_keep=0.45)

tables = ablation_suite(dataset, TrainConfig(epochs=20, batch_size=32, seed=0,
                                             val_fraction=0.1))
print(tables.format_text())
