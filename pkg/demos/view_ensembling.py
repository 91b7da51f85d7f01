"""What does averaging confidences over perturbed views buy?

Trains one model with all four views (the full network, the network
with its last residual branch skipped, and both again under coordinate
reversal), then evaluates held-out tasks with the single plain view
versus the four-view ensemble. The ensemble's averaged confidence
drives every prototype update, so better-calibrated confidence
compounds over transduction steps. Negative log-likelihood here is
computed before any transduction, isolating calibration from the
transductive gain itself.
"""

import numpy as np

from mct import EvalProtocol, SyntheticSpec, TrainConfig, evaluate, train

TRAIN_SOURCE = SyntheticSpec(
    input_dim=16, class_spread=4.0, within_std=1.0, pool_classes=20, pool_seed=0
)
HELDOUT = SyntheticSpec(input_dim=16, class_spread=4.0, within_std=1.0)
EPISODES = 300

print("training 500 steps with view sampling...")
state, _ = train(TRAIN_SOURCE, TrainConfig(steps=500, seed=101))
model = state.to_model_state()

print(f"\nheld-out 5-way 1-shot over {EPISODES} episodes:")
print(f"{'':>14}  {'accuracy':>9}  {'nll t=0':>8}  {'nll t=10':>9}")
for label, ensemble in (("single view", False), ("4-view mean", True)):
    rep = evaluate(
        model, HELDOUT,
        EvalProtocol(n_episodes=EPISODES, T=10, master_seed=7, ensemble=ensemble),
    )
    print(f"{label:>14}  {100 * rep.mean_accuracy:>8.2f}%  {rep.mean_nll:>8.4f}  {rep.mean_nll_final:>9.4f}")

print("\nlower pre-transduction nll means the confidence weights that")
print("drive each update step are better calibrated to begin with")
