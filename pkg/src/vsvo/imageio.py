"""Dataset file formats: binary PGM images, PFM float maps, KITTI pose files."""

import numpy as np


def write_pgm(path, img):
    """Write a float image in [0, 1] as binary P5, maxval 255."""
    arr = np.asarray(img, dtype=float)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path):
    """Read binary P5 back to a float image in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    # Header: magic, width, height, maxval; comments allowed.
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace():
            i += 1
        tokens.append(raw[start:i])
    i += 1  # single whitespace after maxval
    w, h, maxval = int(tokens[0]), int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=i)
    return data.reshape(h, w).astype(float) / maxval


def write_pfm(path, values):
    """Write a float32 grayscale PFM: `Pf`, scale -1.0, bottom-up rows."""
    arr = np.asarray(values, dtype=np.float32)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(arr[::-1].tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w)[::-1].astype(float)


def write_kitti_poses(path, poses):
    """KITTI odometry format: 12 floats per line, row-major 3x4 camera-to-world."""
    with open(path, "w") as f:
        for p in poses:
            f.write(" ".join(repr(float(v)) for v in p.matrix34().ravel()) + "\n")


def read_kitti_poses(path):
    from .geometry import Pose
    poses = []
    with open(path) as f:
        for line in f:
            vals = [float(x) for x in line.split()]
            if not vals:
                continue
            m = np.array(vals).reshape(3, 4)
            poses.append(Pose(m[:, :3], m[:, 3]))
    return poses


def write_calib(path, rig):
    K = rig.intrinsics
    with open(path, "w") as f:
        f.write(f"{float(K.fx)!r} {float(K.fy)!r} {float(K.cx)!r} "
                f"{float(K.cy)!r} {float(rig.baseline)!r}\n")


def read_calib(path, width, height):
    from .geometry import Intrinsics, StereoRig
    with open(path) as f:
        fx, fy, cx, cy, baseline = (float(x) for x in f.read().split())
    return StereoRig(Intrinsics(fx, fy, cx, cy, width, height), baseline)
