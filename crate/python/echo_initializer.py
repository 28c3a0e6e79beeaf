"""Reference external initializer: answers a request by copying its c1 and
c2 channels to the response. Usable as the `initializer.command` of a run
config, e.g. `["python3", "python/echo_initializer.py"]`; the exchange
directory is passed as the last argument.

Request:  <dir>/request/{c1,c2,ud1,ud2}.json (+ .raw), <dir>/request/manifest.json
Response: <dir>/response/{c1,c2}.json (+ .raw), each of shape [ny, nx]
"""

import json
import shutil
import sys
from pathlib import Path


def main(exchange):
    request = exchange / "request"
    response = exchange / "response"
    response.mkdir(parents=True, exist_ok=True)
    manifest = json.loads((request / "manifest.json").read_text())
    for name in manifest["outputs"]:
        header = json.loads((request / f"{name}.json").read_text())
        if header["shape"] != manifest["shape"]:
            sys.exit(f"{name}: shape {header['shape']} does not match manifest {manifest['shape']}")
        shutil.copyfile(request / f"{name}.json", response / f"{name}.json")
        shutil.copyfile(request / header["payload"], response / header["payload"])


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: echo_initializer.py <exchange-dir>")
    main(Path(sys.argv[1]))
