"""Counter-based random streams keyed by (seed, stream_id, channel).

Every trajectory owns one stream id; the four noise sources draw from disjoint
channels so that the Wiener, small-jump, large-jump and regime draws are
independent and can be replayed in isolation.
"""

import numpy as np

CHANNELS = {
    "wiener": 0,
    "small_jump": 1,
    "large_jump": 2,
    "regime": 3,
    "aux": 4,
}


def stream(seed, stream_id, channel):
    """Return a Philox generator for one (seed, stream_id, channel) triple."""
    if channel not in CHANNELS:
        raise KeyError(f"unknown channel {channel!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id), CHANNELS[channel]))
    return np.random.Generator(np.random.Philox(ss))


def trajectory_streams(seed, stream_id):
    return {name: stream(seed, stream_id, name) for name in CHANNELS}
