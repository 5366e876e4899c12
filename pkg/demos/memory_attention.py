"""Memory-augmented attention and the window-to-window memory chain."""

import numpy as np

from tvector.model import frame_encoder_pass
from tvector.nn import EncoderBlock, MultiHeadAttentionMem, mha_mem_forward
from tvector.tensor import Tensor

rng = np.random.default_rng(0)
D, heads, M = 8, 2, 4
attn = MultiHeadAttentionMem.init(rng, D, heads)
x = rng.normal(size=(M, D))
mem = rng.normal(size=(M, D))

out, weights = mha_mem_forward(Tensor(x), mem, attn, return_weights=True)
# queries come only from x; keys and values see memory rows then x rows
print("output", out.shape, "weights", weights.shape)
print("mass on memory rows per head:", weights.data[..., :M].sum(-1).mean(-1).round(3))

# zero memory still takes softmax mass: a zero key scores 0, so weight e^0
_, w0 = mha_mem_forward(Tensor(x), np.zeros((M, D)), attn, return_weights=True)
print("mass on zero memory:", w0.data[..., :M].sum(-1).mean().round(3))

# Two identical windows encode differently because the second one sees the first's outputs.
blocks = [EncoderBlock.init(rng, D, heads, 16) for _ in range(2)]
seg = Tensor(rng.normal(size=(M, D)))
v1, v2 = frame_encoder_pass([seg, seg], blocks)
print("with memory, |v1 - v2| =", float(np.abs(v1.data - v2.data).max()))
w1, w2 = frame_encoder_pass([seg, seg], blocks, use_memory=False)
print("without memory, |v1 - v2| =", float(np.abs(w1.data - w2.data).max()))
