# %% [markdown]
# # The command line, end to end
#
# This walks through synth, train, eval, inspect and replay in a scratch
# directory. Each step is the shell command you would type, run through
# `protoseg.cli.main` so the script needs nothing on PATH.

# %%
import contextlib
import io
import tempfile
from pathlib import Path

from protoseg.cli import main

work = Path(tempfile.mkdtemp(prefix="protoseg-demo-"))


def protoseg(*argv):
    print("$ protoseg", " ".join(map(str, argv)))
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    print(out.getvalue() + err.getvalue(), end="")
    print(f"[exit {code}]\n")
    return out.getvalue()


# %% [markdown]
# A small dataset: 32 px scenes, 16 per class. The directory holds PPM images,
# PGM masks, a per-class index and the fold assignment.

# %%
protoseg("synth", "--out", work / "data", "--per-class", 16, "--size", 32, "--seed", 1)
print((work / "data" / "folds.txt").read_text())

# %% [markdown]
# Training reads a flat `key = value` file. A typo in a key is an error
# rather than being silently ignored:

# %%
(work / "bad.cfg").write_text("iteratons = 10\n")
protoseg("train", "--data", work / "data", "--fold", 0, "--config", work / "bad.cfg", "--out", work / "nope")

(work / "small.cfg").write_text(
    "iterations = 60\n"
    "decay_interval = 30\n"
    "log_every = 20\n"
    "encoder_widths = 8, 16\n"
    "encoder_strides = 2, 1\n"
    "encoder_dilations = 1, 2\n"
)
protoseg("train", "--data", work / "data", "--fold", 0, "--config", work / "small.cfg", "--out", work / "run")
print(sorted(p.name for p in (work / "run").iterdir()))

# %% [markdown]
# The manifest records everything needed to repeat the run: arguments,
# resolved configuration, seeds and a hash of the inputs.

# %%
print((work / "run" / "manifest.txt").read_text())

# %% [markdown]
# Evaluation prints CSV. With the same seed the output is byte-for-byte the
# same, and spreading episodes over worker processes does not change it.

# %%
args = ["eval", "--data", work / "data", "--fold", 0, "--checkpoint", work / "run" / "checkpoint.ptns",
        "--kshot", 1, "--episodes", 10, "--runs", 2]
single = protoseg(*args)
pooled = protoseg(*args, "--jobs", 2)
print("identical:", single == pooled)

# %% [markdown]
# Dump one episode's masks and render them as images alongside a legend.

# %%
protoseg(*args[:-4], "--episodes", 1, "--runs", 1, "--dump-masks", work / "dump")
protoseg("inspect", "--episode-dump", work / "dump" / "run0" / "episode00000", "--out", work / "pictures")
print(sorted(p.name for p in (work / "pictures").iterdir()))
protoseg("inspect", "--checkpoint", work / "run" / "checkpoint.ptns")

# %% [markdown]
# Replay reruns the recorded training command. It refuses to run if the
# dataset has changed since then. The original output directory already
# exists, so we move it aside first.

# %%
(work / "run").rename(work / "run.first")
protoseg("replay", work / "run.first" / "manifest.txt")
first = (work / "run.first" / "checkpoint.ptns").read_bytes()
print("replayed checkpoint identical:", first == (work / "run" / "checkpoint.ptns").read_bytes())
print("scratch directory:", work)
