"""Fixed-rate playback of frame sequences.

Per frame: acquire (load or decode), present through the sink, hold until the
end of the frame's slot, release.  Slots follow the absolute schedule
``start + i / fps`` so per-frame jitter never accumulates; a late frame is
presented late and the next one still targets its own slot (nothing is
dropped).  Acquisition can run ahead on a worker thread with a bounded queue.
"""

import itertools
import os
import queue
import threading
import time
from dataclasses import dataclass

from .asset_io import MeshFrame, TextureFrame, load_texture_ppm, parse_obj
from .codec import decode_latents
from .errors import ConfigError, PlaybackError

EVENTS_HEADER = "frame,acquire_s,present_ts,release_ts"
SPIN_S = 0.002


@dataclass(frozen=True)
class PlaybackConfig:
    fps: float
    loop: bool = False
    passes: int = 1  # passes when loop is set; 0 means until stopped

    def __post_init__(self):
        if not self.fps > 0:
            raise ConfigError("fps must be positive")
        if self.passes < 0:
            raise ConfigError("passes must be >= 0")


@dataclass(frozen=True)
class FrameEvent:
    frame_index: int
    acquire_start: float
    acquire_seconds: float
    deadline: float
    present_timestamp: float
    release_timestamp: float
    pass_index: int = 0

    @property
    def lateness(self):
        return self.present_timestamp - self.deadline


class FrameSource:
    """Sequence of frames to play.  ``acquire`` may be slow; ``release`` is called
    exactly once for every acquired frame."""

    def __len__(self):
        raise NotImplementedError

    def acquire(self, index):
        raise NotImplementedError

    def release(self, frame):
        pass


class ListSource(FrameSource):
    def __init__(self, frames):
        self.frames = list(frames)

    def __len__(self):
        return len(self.frames)

    def acquire(self, index):
        return self.frames[index]


class ManifestSource(FrameSource):
    """Loads raw OBJ (+ PPM) frames listed in a manifest."""

    def __init__(self, manifest):
        self.manifest = manifest

    def __len__(self):
        return len(self.manifest.rows)

    def acquire(self, index):
        row = self.manifest.rows[index]
        with open(self.manifest.resolve(row.mesh), "rb") as fh:
            mesh = parse_obj(fh.read(), row.frame)
        tex = None
        if row.texture:
            with open(self.manifest.resolve(row.texture), "rb") as fh:
                tex = load_texture_ppm(fh.read())
        return mesh, tex


class EncodedSource(FrameSource):
    """Decodes frames of an encoded sequence on demand."""

    def __init__(self, model, encoded):
        self.model, self.encoded = model, encoded

    def __len__(self):
        return self.encoded.frame_count

    def acquire(self, index):
        enc = self.encoded
        ids = enc.label_ids[index:index + 1] if enc.conditioned else None
        mesh, tex = decode_latents(self.model, enc.latents[index:index + 1], enc, ids)
        frame = MeshFrame(mesh[0], enc.faces, int(enc.frame_indices[index]))
        texture = None
        if tex is not None:
            lo, hi = min(enc.texture_spec.data_min), max(enc.texture_spec.data_max)
            texture = TextureFrame(tex[0].clip(lo, hi), (lo, hi))
        return frame, texture


def wait_until(t, clock=time.perf_counter):
    """Sleep, then spin the last couple of milliseconds, until ``clock() >= t``."""
    while True:
        remain = t - clock()
        if remain <= 0:
            return
        if remain > SPIN_S:
            time.sleep(remain - SPIN_S)


class _Failure:
    def __init__(self, index, exc):
        self.index, self.exc = index, exc


_DONE = object()


def prefetch_pipeline(source, depth, indices=None, stop=None):
    """Yield ``(index, frame, acquire_start, acquire_seconds)`` in order, acquired
    up to ``depth`` frames ahead on a worker thread.

    A failed acquisition is yielded as a ``_Failure`` at its position.  Closing
    the generator stops the worker and releases frames it had queued.
    """
    if depth < 1:
        raise ConfigError("prefetch depth must be >= 1")
    indices = range(len(source)) if indices is None else indices
    q = queue.Queue(maxsize=depth)
    halt = threading.Event()
    clock = time.perf_counter

    def put(item):
        while not halt.is_set():
            try:
                q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def work():
        for i in indices:
            if halt.is_set() or (stop is not None and stop.is_set()):
                break
            t0 = clock()
            try:
                frame = source.acquire(i)
            except Exception as exc:  # surfaced to the consumer at this index
                put(_Failure(i, exc))
                return
            item = (i, frame, t0, clock() - t0)
            if not put(item):
                source.release(frame)
                return
        put(_DONE)

    worker = threading.Thread(target=work, name="frame-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            yield item
            if isinstance(item, _Failure):
                return
    finally:
        halt.set()
        worker.join()
        while True:
            try:
                item = q.get_nowait()
            except queue.Empty:
                break
            if isinstance(item, tuple):
                source.release(item[1])


def _inline(source, indices, stop):
    clock = time.perf_counter
    for i in indices:
        if stop is not None and stop.is_set():
            return
        t0 = clock()
        try:
            frame = source.acquire(i)
        except Exception as exc:
            yield _Failure(i, exc)
            return
        yield i, frame, t0, clock() - t0


def _slot_indices(n, passes):
    if passes is None:
        return itertools.cycle(range(n))
    return itertools.chain.from_iterable(itertools.repeat(range(n), passes))


def play(config, source, sink=None, prefetch=0, stop=None, clock=time.perf_counter):
    """Play ``source`` at ``config.fps``; returns the list of :class:`FrameEvent`.

    The schedule starts once the first frame is acquired, so pre-roll latency
    is not charged to any slot.  Timestamps are seconds relative to that
    start (the first acquisition therefore starts at a negative time).  One
    acquisition stream spans all loop passes, so prefetch also covers the
    wrap-around.  On acquisition failure raises :class:`PlaybackError`
    carrying the events so far and the failing index.
    """
    n = len(source)
    events = []
    if n == 0:
        return events
    period = 1.0 / config.fps
    passes = (config.passes if config.loop else 1) or None
    indices = _slot_indices(n, passes)
    stream = prefetch_pipeline(source, prefetch, indices, stop) if prefetch else _inline(source, indices, stop)
    start = None
    try:
        for slot, item in enumerate(stream):
            if isinstance(item, _Failure):
                raise PlaybackError(item.index, events, item.exc)
            i, frame, t_acq, acq_s = item
            try:
                if start is None:
                    start = clock()
                deadline = start + slot * period
                wait_until(deadline, clock)
                present = clock()
                if sink is not None:
                    sink(i, frame)
                wait_until(start + (slot + 1) * period, clock)
            finally:
                source.release(frame)
            release = clock()
            events.append(FrameEvent(i, t_acq - start, acq_s, deadline - start,
                                     present - start, release - start, slot // n))
            if stop is not None and stop.is_set():
                break
    finally:
        if hasattr(stream, "close"):
            stream.close()
    return events


def deadline_misses(events, fps, tolerance=0.25):
    """Count presents that lagged their slot start by more than ``tolerance`` budgets."""
    return sum(1 for e in events if e.lateness > tolerance / fps)


def events_csv(events):
    lines = [EVENTS_HEADER]
    lines += [f"{e.frame_index},{e.acquire_seconds:.6f},{e.present_timestamp:.6f},{e.release_timestamp:.6f}"
              for e in events]
    return "\n".join(lines) + "\n"


def write_events(path, events):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(events_csv(events))
