"""Proof-cost measurement over synthetic parameter vectors (no training)."""

from __future__ import annotations

import threading
import time

import numpy as np

from . import _kernels as K
from . import defense, frames, frequency, zkcircuit
from .field import P
from .modelcore import ParamVector


def synthetic_round(n_params, seed, k=3, magnitude=1 << 14):
    """A consistent defense-round statement/witness over random vectors."""
    rng = np.random.default_rng(seed)
    params = defense.DefenseParams()
    models = [ParamVector(rng.integers(-magnitude, magnitude, n_params).astype(np.int64))
              for _ in range(k + 1)]
    updates = [ParamVector(rng.integers(-magnitude // 4, magnitude // 4, n_params).astype(np.int64))
               for _ in range(k + 1)]
    src = k - 1
    updates[k] = ParamVector(models[k].raw - models[src].raw)
    raw = [frequency.poison_score(u) for u in updates]
    weights = params.weights(k + 1)
    adjusted = [w * s for w, s in zip(weights, raw)]
    rm = max(range(k + 1), key=lambda i: (adjusted[i], -i))
    surviving = [a for i, a in enumerate(adjusted) if i != rm]
    bm = min(range(k), key=lambda i: (surviving[i], i))
    bm_t = bm if bm < rm else bm + 1
    side = frequency.side_length(n_params)

    session_seed = seed * 7919 + 17
    _, _, chseed, _ = zkcircuit.derive_session_params(session_seed)
    bound_s = [int(x) for x in K.uniform_mod(seed ^ 0xB0, 0, 2 * k)]
    bind_b = K.uniform_mod(seed ^ 0xB1, 0, 2 * k)
    bound_vecs = ([zkcircuit.embed_params(m) for m in models[:k]]
                  + [zkcircuit.embed_params(u) for u in updates[:k]])
    bound_h = [(int(bind_b[i]) + K.eval_poly(bound_vecs[i], bound_s[i])) % P
               for i in range(2 * k)]
    st = zkcircuit.RoundStatement(
        n=n_params, side=side, frac_bits=16, k=k, weights=tuple(weights),
        removed_index=rm, bm_index=bm, src_index=src,
        s_wm=adjusted[rm] % P, s_bm=adjusted[bm_t] % P,
        bound_digests=tuple(bound_h))
    reg_b = K.uniform_mod(seed ^ 0xB2, 0, 2 * (k + 1))
    wit = zkcircuit.make_round_witness(models, updates, st, bind_b, reg_b)
    return st, wit, bound_s, session_seed


def measure_proof_cost(n_params, seed, timeout=300.0):
    """One server-verifier defense proof over synthetic vectors; returns cost stats."""
    st, wit, bound_s, session_seed = synthetic_round(n_params, seed)
    ch_p, ch_v = frames.QueueChannel.pair(timeout=timeout)
    result = {}
    tv = threading.Thread(target=lambda: result.update(v=zkcircuit.run_verifier_session(
        ch_v, session_seed, lambda e: zkcircuit.defense_circuit(e, st, None),
        bound_points=bound_s)))
    t0 = time.time()
    tv.start()
    zkcircuit.run_prover_session(ch_p, session_seed,
                                 lambda e: zkcircuit.defense_circuit(e, st, wit))
    tv.join(timeout=timeout)
    elapsed = time.time() - t0
    ok, tag, _ = result["v"]
    return {
        "cell": f"params-{n_params}",
        "params": n_params,
        "side": st.side,
        "ok": bool(ok),
        "tag": tag,
        "bytes": int(ch_p.bytes_sent + ch_p.bytes_received),
        "seconds": elapsed,
    }


def affine_fit(xs, ys):
    """Least-squares line fit with R^2."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": float(r2)}
