"""Kernel backend selection: compiled extension when available, numpy fallback otherwise.

Set ZKSPLIT_FORCE_FALLBACK=1 to skip the extension (used by the parity tests
and the backend benchmark). Both backends are bit-identical by contract.
"""

import os

from . import fallback

if os.environ.get("ZKSPLIT_FORCE_FALLBACK"):
    _impl = fallback
else:
    try:
        from . import _corefast as _impl
    except ImportError:
        _impl = fallback

P = _impl.P
BACKEND = _impl.BACKEND

addmod = _impl.addmod
submod = _impl.submod
mulmod = _impl.mulmod
negmod = _impl.negmod
sum_mod = _impl.sum_mod
dot_mod = _impl.dot_mod
matvec_mod = _impl.matvec_mod
powers_mod = _impl.powers_mod
eval_poly = _impl.eval_poly
splitmix_raw = _impl.splitmix_raw
uniform_mod = _impl.uniform_mod
to_signed = _impl.to_signed
from_signed = _impl.from_signed
rescale_matmul = _impl.rescale_matmul
