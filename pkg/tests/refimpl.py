"""Independent numpy re-implementation of the forward math, used as the
oracle for golden-output tests. No autodiff code is shared with the package:
everything here is rebuilt from the parameter arrays alone."""

import numpy as np


def layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu(x):
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def linear(x, params, name):
    out = x @ params[f"{name}.w"]
    if f"{name}.b" in params:
        out = out + params[f"{name}.b"]
    return out


def attention(x_q, x_kv, params, prefix, heads, mask=None):
    q = linear(x_q, params, f"{prefix}.wq")
    k = linear(x_kv, params, f"{prefix}.wk")
    v = linear(x_kv, params, f"{prefix}.wv")
    hd = q.shape[-1] // heads
    outs = []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / np.sqrt(hd)
        if mask is not None:
            scores = scores + mask
        outs.append(softmax(scores) @ v[..., sl])
    return linear(np.concatenate(outs, axis=-1), params, f"{prefix}.wo")


def block(x, params, prefix, heads, kv=None, mask=None):
    h = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = x + attention(h, h, params, f"{prefix}.attn", heads, mask=mask)
    if f"{prefix}.xattn.wq.w" in params:
        h = layer_norm(x, params[f"{prefix}.ln_x.g"], params[f"{prefix}.ln_x.b"])
        x = x + attention(h, kv, params, f"{prefix}.xattn", heads)
    h = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    x = x + linear(gelu(linear(h, params, f"{prefix}.mlp.fc1")), params, f"{prefix}.mlp.fc2")
    return x


def sinusoid(length, dim):
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def patchify(img, patch):
    h, w, c = img.shape
    gh, gw = h // patch, w // patch
    x = img.reshape(gh, patch, gw, patch, c)
    x = np.moveaxis(x, 1, 2)
    return x.reshape(gh * gw, patch * patch * c)


def patch_encoder_forward(img, params, patch, depth, heads):
    x = linear(patchify(img, patch), params, "proj")
    x = x + sinusoid(x.shape[0], x.shape[1])
    for i in range(depth):
        x = block(x, params, f"block{i}", heads)
    return layer_norm(x, params["ln_f.g"], params["ln_f.b"])


def text_encoder_forward(ids, params, depth, heads):
    tok = params["emb"][np.asarray(ids, dtype=np.int64)]
    x = np.concatenate([params["cls"], tok], axis=0) if len(ids) else params["cls"]
    x = x + sinusoid(x.shape[0], x.shape[1])
    for i in range(depth):
        x = block(x, params, f"block{i}", heads)
    x = layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return x, x[0]


def qformer_forward(enc_tokens, params, depth, heads):
    x = params["queries"]
    for i in range(depth):
        x = block(x, params, f"block{i}", heads, kv=enc_tokens)
    return layer_norm(x, params["ln_f.g"], params["ln_f.b"])


def decoder_forward(prefix_rows, ids, params, layers, heads):
    ids = np.asarray(ids, dtype=np.int64)
    x = params["tok_emb"][ids] + params["pos_emb"][: len(ids)]
    p = 0
    if prefix_rows is not None:
        p = prefix_rows.shape[0]
        x = np.concatenate([prefix_rows, x], axis=0)
    total = p + len(ids)
    mask = np.full((total, total), -1e9)
    mask[:p, :p] = 0.0
    for s in range(len(ids)):
        mask[p + s, : p + s + 1] = 0.0
    for i in range(layers):
        x = block(x, params, f"block{i}", heads, mask=mask)
    x = layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return linear(x[p:], params, "head")
