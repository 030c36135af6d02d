"""Shared test fixtures that are independent of the package's generators."""
import numpy as np

from landmark_srt.camera_geometry import look_at_camera


def blob_texture(rng, n=80, smin=3.5, smax=7.0, size=48):
    """Continuous random texture: a sum of Gaussian blobs, evaluable anywhere."""
    c = rng.uniform(-6, size + 6, (n, 2))
    s = rng.uniform(smin, smax, n)
    a = rng.uniform(-1, 1, n)

    def f(x, y):
        x = np.asarray(x, float)[..., None]
        y = np.asarray(y, float)[..., None]
        return np.sum(a * np.exp(-((x - c[:, 0]) ** 2 + (y - c[:, 1]) ** 2) / (2 * s ** 2)), axis=-1)

    return f


def shifted_pair(f, d, size=48):
    """Rasters of ``f`` and of ``f`` translated by ``d`` (content moves by +d)."""
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    return f(xs, ys), f(xs - d[0], ys - d[1])


def grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return xs, ys


def bandlimited_pair(rng, d, sigma=2.0, size=64):
    """Periodic Gaussian-filtered noise and its exact translate by ``d``.

    The translate is a Fourier phase shift, so no resampling is involved.
    Both rasters are scaled to unit standard deviation.
    """
    k = np.fft.fftfreq(size) * 2 * np.pi
    kx, ky = np.meshgrid(k, k)
    spec = np.fft.fft2(rng.normal(size=(size, size))) * np.exp(-0.5 * sigma ** 2 * (kx ** 2 + ky ** 2))
    F0 = np.fft.ifft2(spec).real
    F1 = np.fft.ifft2(spec * np.exp(-1j * (kx * d[0] + ky * d[1]))).real
    s = F0.std()
    return F0 / s, F1 / s


def random_scene(rng, M):
    cams = []
    for _ in range(M):
        d = rng.normal(size=3)
        d[2] = -abs(d[2]) - 0.5  # cameras on the -z side, looking towards +z
        d /= np.linalg.norm(d)
        up = rng.normal(size=3)
        cams.append(look_at_camera(d * rng.uniform(8, 12), up=up, focal=rng.uniform(400, 700)))
    X = rng.uniform(-1, 1, size=3)
    return np.array(cams), X


ACCEPTANCE_LINES = []


def report(n, ok, detail):
    """Print and remember one pass/fail line for acceptance criterion ``n``."""
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok
