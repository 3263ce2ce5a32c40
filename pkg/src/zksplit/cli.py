"""Command-line interface: run experiments, suites, transcript checks, selftest."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np


def cmd_run(args):
    from . import harness, protocol
    from .config import load_config
    cfg = load_config(args.config)
    log = protocol.run_experiment(cfg)
    if args.out:
        harness.emit_jsonl(log, args.out)
    report = harness.compute_metrics(log)
    print(json.dumps(report.as_dict(), sort_keys=True))
    return 0


def cmd_suite(args):
    from . import harness
    from .config import RunConfig
    seeds = tuple(int(s) for s in args.seeds.split(","))
    base = None
    if args.config:
        from .config import load_config
        base = load_config(args.config)
    table = harness.run_suite(args.name, args.out, seeds=seeds, base=base)
    for row in table:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_verify_transcript(args):
    from . import frames
    ok, detail = frames.replay_transcript(frames.load_transcript(args.file))
    print(f"{'ACCEPT' if ok else 'REJECT'}: {detail}")
    return 0 if ok else 1


def cmd_selftest(args):
    """Field, DCT, and gadget oracles in one quick pass."""
    from . import _kernels as K
    from . import frequency, zkcircuit
    from .field import P, add, inv, mul

    rng = np.random.default_rng(7)
    for _ in range(200):
        a, b, c = (int(x) for x in rng.integers(0, P, 3))
        assert add(add(a, b), c) == add(a, add(b, c))
        assert mul(a, mul(b, c)) == mul(mul(a, b), c)
        if a:
            assert mul(a, inv(a)) == 1
    arr = rng.integers(0, P, 4096, dtype=np.uint64)
    brr = rng.integers(0, P, 4096, dtype=np.uint64)
    assert K.dot_mod(arr, brr) == sum(int(x) * int(y) for x, y in zip(arr, brr)) % P
    print("field kernels: ok")

    for n in (2, 3, 8, 16):
        c = frequency.dct_matrix_float(n)
        assert np.max(np.abs(c @ c.T - np.eye(n))) < 1e-9
        m = rng.normal(size=(n, n))
        d = frequency.dct2_float(m)
        assert abs(np.linalg.norm(d) - np.linalg.norm(m)) < 1e-6
    print("dct orthonormality/parseval: ok")

    def prog(eng):
        p = eng.role == "prover"
        x = eng.commit(np.array([3], dtype=np.uint64) if p else None, 1)
        y = eng.commit(np.array([4], dtype=np.uint64) if p else None, 1)
        z = eng.mul(x, y, "absprod")
        eng.assert_zero(zkcircuit.wire_sub(z, eng.const(np.array([12], dtype=np.uint64))), "score")
        eng.challenge_round(0, 0)
        return eng.finalize()

    (_, _, _), (vok, vtag, _) = zkcircuit.run_local_proof(prog, prog, 4711)
    assert vok, vtag
    print("gadget session: ok")
    print("selftest passed")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="zksplit",
                                     description="verifiable split-learning defense harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", help="write the run log (JSON lines) here")
    p_run.set_defaults(fn=cmd_run)

    p_suite = sub.add_parser("suite", help="run a named experiment suite")
    p_suite.add_argument("name")
    p_suite.add_argument("--out", required=True)
    p_suite.add_argument("--seeds", default="1,2,3")
    p_suite.add_argument("--config", help="optional base config file")
    p_suite.set_defaults(fn=cmd_suite)

    p_vt = sub.add_parser("verify-transcript", help="structurally replay a session transcript")
    p_vt.add_argument("file")
    p_vt.set_defaults(fn=cmd_verify_transcript)

    p_st = sub.add_parser("selftest", help="run the built-in field/DCT/gadget oracles")
    p_st.set_defaults(fn=cmd_selftest)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
