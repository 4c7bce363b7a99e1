"""Centers move toward neutral, frontal samples and ignore extreme ones."""
import numpy as np

from sirface.centers import init_centers, neutral_confidence, update_centers
from sirface.model import Pose

frontal = Pose()
turned = Pose.from_euler(np.radians(80), 0.0, 0.0)
print("confidence, frontal neutral:", neutral_confidence(frontal, np.zeros(5)))
print("confidence, frontal smiling:", round(neutral_confidence(frontal, np.full(5, 0.4)), 4))
print("confidence, 80 deg yaw:     ", round(neutral_confidence(turned, np.zeros(5)), 4))

table = init_centers(1, 3, learning_rate=0.5)
target = np.array([1.0, -2.0, 0.5])
for step in range(6):
    table = update_centers(table, [(target, 0, 1.0)])
    print(f"step {step + 1}: distance to sample {np.linalg.norm(table[0] - target):.4f}")

# a zero-confidence sample leaves the center untouched
same = update_centers(table, [(np.zeros(3), 0, 0.0)])
print("unchanged by f=0 sample:", np.array_equal(same[0], table[0]))
