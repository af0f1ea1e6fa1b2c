"""Walk through the Set-of-Mark baseline without a network.

Draws the marks on one scene, saves the annotated views, then scores a few
scenes with a mock that always answers "none" and with one that knows the
labels. Pass ``--http`` (with ODDVOX_CHAT_API_KEY set) to query a real
chat endpoint instead.

    python3 demos/som_mock.py [--http]
"""

import sys
from pathlib import Path

from PIL import Image

from oddvox.scenegen import build_scene
from oddvox.som import PROMPT, HttpChatClient, MockClient, evaluate_som, scene_request

out = Path("som_demo")
out.mkdir(exist_ok=True)
scenes = [build_scene(5, k) for k in range(6)]

req = scene_request(scenes[0], seed=0)
for k, img in enumerate(req.images):
    Image.fromarray(img).save(out / f"scene0_view{k}.png")
print(PROMPT)
print(f"saved {len(req.images)} annotated views to {out}/")

if "--http" in sys.argv:
    rep = evaluate_som(scenes, HttpChatClient(), transcript=out / "transcript.jsonl")
    print(f"remote model: accuracy {rep['accuracy']:.3f}")
else:
    blank = evaluate_som(scenes, MockClient(default="none"))
    print(f"always 'none': accuracy {blank['accuracy']:.3f} (the normal-object rate)")
    knows = MockClient({s.name: str([i + 1 for i, y in enumerate(s.labels) if y]) for s in scenes})
    print(f"label oracle:  accuracy {evaluate_som(scenes, knows)['accuracy']:.3f}")
