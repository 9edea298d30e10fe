import json
import socket

import numpy as np
import pytest
from PIL import Image, ImageDraw


def synthetic_answer_image(rng, width=800, height=560, n=10, r_range=(15, 60), noise=5.0,
                           ring_width=3, color=(220, 30, 30)):
    """Answer-style image with ``n`` non-overlapping marker rings plus Gaussian noise.

    Returns the image and the list of true (u, v, r) circles.
    """
    circles = []
    attempts = 0
    while len(circles) < n:
        attempts += 1
        if attempts > 10000:
            raise RuntimeError("could not place circles")
        r = int(rng.integers(r_range[0], r_range[1] + 1))
        u = int(rng.integers(r + 4, width - r - 4))
        v = int(rng.integers(r + 4, height - r - 4))
        if all(np.hypot(u - cu, v - cv) > r + cr + 12 for cu, cv, cr in circles):
            circles.append((u, v, r))
    base = Image.new("RGB", (width, height), (236, 232, 224))
    draw = ImageDraw.Draw(base)
    for u, v, r in circles:
        draw.ellipse((u - r, v - r, u + r, v + r), outline=color, width=ring_width)
    arr = np.asarray(base, dtype=np.float64) + rng.normal(0, noise, (height, width, 3))
    img = Image.fromarray(np.clip(np.rint(arr), 0, 255).astype(np.uint8))
    return img, circles


@pytest.fixture
def answer_image_factory():
    return synthetic_answer_image


@pytest.fixture
def gradient_image():
    """600x600 RGB test image with smooth gradients and a couple of shapes."""
    yy, xx = np.mgrid[0:600, 0:600]
    arr = np.stack([xx * 255 / 599, yy * 255 / 599, (xx + yy) * 255 / 1198], axis=-1)
    img = Image.fromarray(arr.astype(np.uint8))
    d = ImageDraw.Draw(img)
    d.rectangle((100, 100, 220, 260), fill=(250, 250, 250))
    d.ellipse((350, 380, 520, 520), fill=(10, 20, 30))
    return img


@pytest.fixture
def no_network(monkeypatch):
    """Fail loudly on any outbound socket connection."""

    def deny(*args, **kwargs):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket.socket, "connect", deny)
    monkeypatch.setattr(socket.socket, "connect_ex", deny)
    monkeypatch.setattr(socket, "create_connection", deny)
    yield


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
