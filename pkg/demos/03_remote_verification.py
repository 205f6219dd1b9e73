"""Black-box verification over HTTP.

Starts the reference suspect server on an untrained toy encoder, queries it
through RemoteSuspect, and confirms the transport is lossless: feature
vectors match the in-process route to within the 9-significant-digit wire
precision. Runs in a couple of seconds.

    python3 demos/03_remote_verification.py
"""

import tempfile
from pathlib import Path

import numpy as np

from clmark.cltrain import EncoderModel, init_params
from clmark.imagecore import ImageTensor
from clmark.modelio import save_encoder
from clmark.suspectio import InProcessSuspect, RemoteSuspect, serve

work = Path(tempfile.mkdtemp(prefix="clmark_demo_"))
arch = (16 * 16 * 3, 64, 32)
encoder = EncoderModel(arch=arch, params=init_params(arch, seed=0))
save_encoder(encoder, work / "encoder.bin")

server = serve(str(work / "encoder.bin"))
print(f"suspect server listening at {server.url}")
try:
    remote = RemoteSuspect(server.url)
    print(f"capabilities: {remote.capabilities()}")

    rng = np.random.default_rng(0)
    images = [ImageTensor(rng.uniform(0, 1, size=(16, 16, 3))) for _ in range(32)]
    feats_local = InProcessSuspect(encoder).query(images, "feature").vectors
    feats_remote = remote.query(images, "feature").vectors
    diff = float(np.max(np.abs(feats_local - feats_remote)))
    print(f"32 probes, feature dim {feats_remote.shape[1]}: "
          f"max |in-process - remote| = {diff:.2e}")
finally:
    server.shutdown()
    print("server stopped")
