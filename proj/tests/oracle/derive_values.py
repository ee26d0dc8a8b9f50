"""Independent reference values for the C++ tests, computed with PyTorch in
float64. Rerun with `python3 tests/oracle/derive_values.py` and paste the
output into tests/oracle_values.hpp if a fixture here changes."""

import math

import torch

torch.set_default_dtype(torch.float64)


def t(x):
    return torch.tensor(x, requires_grad=True)


# Tiny network: 3 inputs -> 4 hidden (ReLU) -> 4-dim embedding, 2 conditions.
W1 = t([[0.5, -0.2, 0.1], [0.3, 0.8, -0.5], [-0.6, 0.4, 0.9], [0.2, 0.2, 0.2]])
b1 = t([0.1, -0.1, 0.05, -0.25])
P = t([[1.0, -0.5, 0.2, 0.3], [0.4, 0.6, -0.7, 0.1], [-0.3, 0.2, 0.5, 0.9], [0.8, -0.1, 0.3, -0.4]])
beta = t([[0.9, -0.2], [0.4, 1.1], [-0.5, 0.7], [1.3, 0.2]])

anchors = torch.tensor([[1.0, 0.0, 0.5], [0.2, -0.4, 0.9], [-0.3, 0.8, 0.1]])
closes = torch.tensor([[0.9, 0.1, 0.4], [0.0, -0.5, 1.0], [0.7, 0.2, -0.6]])
fars = torch.tensor([[-0.8, 0.6, 0.3], [0.5, 0.5, -0.5], [-0.2, 0.9, 0.3]])
conds = [0, 1, 1]
margin, lam1, lam2 = 0.2, 5e-3, 5e-4


def embed(x):
    return torch.relu(x @ W1.T + b1) @ P.T


def csn_terms():
    ya, yc, yf = embed(anchors), embed(closes), embed(fars)
    m = torch.relu(beta).T[conds]
    dc = ((ya - yc) * m).norm(dim=1)
    df = ((ya - yf) * m).norm(dim=1)
    trip = torch.clamp(dc - df + margin, min=0).mean()
    y = torch.cat([ya, yc, yf])
    lw = (y ** 2).sum() / y.shape[0]
    lm = torch.relu(beta).sum()
    return trip, lw, lm, trip + lam1 * lw + lam2 * lm


trip, lw, lm, total = csn_terms()
total.backward()


def fmt(name, v):
    print(f"inline constexpr double {name} = {v:.17g};")


def fmt_list(name, vs):
    print(f"inline constexpr double {name}[] = {{" + ", ".join(f"{v:.17g}" for v in vs) + "};")


fmt("kJointTriplet", trip.item())
fmt("kJointEmbedding", lw.item())
fmt("kJointMask", lm.item())
fmt("kJointTotal", total.item())
fmt_list("kJointGradProjection", P.grad.flatten().tolist())
fmt_list("kJointGradBeta", beta.grad.flatten().tolist())
fmt_list("kJointGradHiddenWeight", W1.grad.flatten().tolist())

# Softmax cross-entropy, mean over rows.
logits = t([[2.0, -1.0, 0.5], [0.1, 0.2, 0.3]])
ce = torch.nn.functional.cross_entropy(logits, torch.tensor([0, 2]))
ce.backward()
fmt("kCrossEntropy", ce.item())
fmt_list("kCrossEntropyGrad", logits.grad.flatten().tolist())

# Two ADAM steps with decays 0.9 / 0.999, alpha 1e-3, eps 1e-8.
p = t([1.0, -2.0, 0.5])
opt = torch.optim.Adam([p], lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
for g in ([0.3, -1.5, 0.0], [-0.2, 0.4, 2.0]):
    opt.zero_grad()
    p.grad = torch.tensor(g)
    opt.step()
fmt_list("kAdamTwoSteps", p.detach().tolist())

# Same two steps with the literal decays 0.1 / 0.001.
p = t([1.0, -2.0, 0.5])
opt = torch.optim.Adam([p], lr=1e-3, betas=(0.1, 0.001), eps=1e-8)
for g in ([0.3, -1.5, 0.0], [-0.2, 0.4, 2.0]):
    opt.zero_grad()
    p.grad = torch.tensor(g)
    opt.step()
fmt_list("kAdamTwoStepsLiteral", p.detach().tolist())

# Fraction of N(0.9, variance 0.7) above zero.
fmt("kNormalActiveFraction", 0.5 * (1 + math.erf(0.9 / math.sqrt(0.7) / math.sqrt(2))))
