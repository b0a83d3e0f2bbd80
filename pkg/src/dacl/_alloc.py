"""Keep freed tape buffers in the heap between training steps.

The tape holds several megabyte-sized intermediates per step. glibc serves
those with fresh mmap calls and returns them on free, so every step pays the
page faults again (about half of the step time at desk scale). Raising the
mmap and trim thresholds lets the allocator reuse them. No-op off glibc.
"""

import ctypes
import ctypes.util

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator(mmap_threshold=32 << 20, trim_threshold=256 << 20):
    global _done
    if _done:
        return True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(M_MMAP_THRESHOLD, mmap_threshold) == 1 and mallopt(M_TRIM_THRESHOLD, trim_threshold) == 1
    _done = ok
    return ok
