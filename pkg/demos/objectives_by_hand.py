"""The two adaptation objectives on numbers small enough to check by hand.

Runs in well under a second.
"""
import numpy as np

from fewshot_sed.mutual import contrastive_loss
from fewshot_sed.transductive import Classifier, entropies, posterior

# Mutual information of a posterior table: H(marginal) - mean H(row).
confident_balanced = np.array([[1.0, 0.0], [0.0, 1.0]])
undecided = np.array([[0.5, 0.5], [0.5, 0.5]])
collapsed = np.array([[1.0, 0.0], [1.0, 0.0]])
for name, p in [("confident, balanced", confident_balanced), ("undecided", undecided), ("collapsed", collapsed)]:
    mi, h_marg, h_cond = (abs(round(v, 4)) for v in entropies(p))  # abs: no "-0.0000"
    print(f"{name:20s}  I = {mi:.4f}  H(Y) = {h_marg:.4f}  H(Y|X) = {h_cond:.4f}")
print(f"ln 2 = {np.log(2):.4f}: the most a two-class table can reach\n")

# Posteriors are softmax over W z with unit-norm z; the prototype rows keep their scale.
W = np.array([[3.0, 0.0], [0.0, 1.0]])
z = np.array([[1.0, 0.0], [0.0, 1.0], [np.sqrt(0.5), np.sqrt(0.5)]])
print("posteriors (POS, NEG):")
print(np.round(posterior(Classifier(W), z), 4))
print("the diagonal point leans POS only because the POS row is longer\n")

# Contrastive term: the positive pair is not in the denominator, so it can go negative.
w = np.array([1.0, 0.0])
print(f"L_c, positive aligned, one opposite negative: {contrastive_loss(w, np.array([1.0, 0.0]), -w[None, :]):+.4f}")
print(f"L_c, positive equals the negative:            {contrastive_loss(w, np.array([0.0, 1.0]), np.array([[0.0, 2.0]])):+.4f}")
