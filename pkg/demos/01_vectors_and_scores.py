"""Parameter vectors, model updates, and the Dice overlap score.

The whole framework exchanges exactly one thing: a flat float64 vector of
model weights. This walk-through shows the value types and the overlap
metric used to score segmentations.
"""
import numpy as np

from fedkit import ParameterVector, ModelUpdate, add_scaled, dice_score, l2_distance

# A model is just a flat vector; layer structure is the trainer's concern.
w = ParameterVector([0.5, -1.25, 3.0])
print("model:", w, "dim:", w.dim)

# add_scaled is the building block of every averaging rule: a + coeff * b
step = add_scaled(w, ParameterVector([1.0, 1.0, 1.0]), -0.1)
print("after a gradient-like step:", step.tolist())

# distances feed the proximal/personalization regularizers
print("moved by:", l2_distance(w, step))

# Updates carry the sample count used as the aggregation weight.
update = ModelUpdate(client_id="basel", round=0, params=step, sample_count=26,
                     train_seconds=4.2)
print("update:", update.client_id, "round", update.round, "n =", update.sample_count)

# Dice: overlap between a predicted and a true mask, 1.0 = perfect.
truth = np.zeros(16, dtype=int)
truth[4:9] = 1
predicted = np.zeros(16, dtype=int)
predicted[5:10] = 1
print("truth:     ", truth)
print("predicted: ", predicted)
print("dice:", dice_score(predicted, truth))  # 2*4 / (5+5) = 0.8

# Two empty masks agree perfectly by convention, keeping the metric total.
print("empty vs empty:", dice_score([0, 0, 0], [0, 0, 0]))
