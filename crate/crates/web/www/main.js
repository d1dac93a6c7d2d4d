import init, { generateScene, windowRects, planCoverage } from "./pkg/sfr_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#e41a1c", "#ff7f00", "#4daf4a", "#377eb8", "#984ea3"];

let scene = null;
let sceneImage = null;
let prp = [0, 0];

function report(e) {
  $("err").textContent = e ? String(e.message ?? e) : "";
}

function blit(canvas, rgba, w, h) {
  canvas.width = w;
  canvas.height = h;
  const img = new ImageData(new Uint8ClampedArray(rgba), w, h);
  canvas.getContext("2d").putImageData(img, 0, 0);
  return img;
}

function drawWindows() {
  if (!scene) return;
  const n = scene.size();
  const ctx = $("image").getContext("2d");
  ctx.putImageData(sceneImage, 0, 0);
  try {
    const d = $("dist").value.split(",").map(Number);
    const r = windowRects(n, n, prp[0], prp[1], new Float64Array(d));
    const text = [];
    for (let i = 0; i < r.length; i += 4) {
      ctx.strokeStyle = COLORS[(i / 4) % COLORS.length];
      ctx.lineWidth = 2;
      ctx.strokeRect(r[i], r[i + 1], r[i + 2] - r[i], r[i + 3] - r[i + 1]);
      text.push(`[${r[i].toFixed(1)}, ${r[i + 1].toFixed(1)}, ${r[i + 2].toFixed(1)}, ${r[i + 3].toFixed(1)}]`);
    }
    ctx.fillStyle = "#fff";
    ctx.fillRect(prp[0] - 2, prp[1] - 2, 5, 5);
    $("rects").textContent = text.join("  ");
    report(null);
  } catch (e) {
    report(e);
  }
}

function generate() {
  try {
    const size = Number($("size").value);
    scene = generateScene(size, Number($("seed").value));
    sceneImage = blit($("image"), scene.image_rgba(), size, size);
    blit($("labels"), scene.labels_rgba(), size, size);
    prp = [size / 2, size / 2];
    drawWindows();
  } catch (e) {
    report(e);
  }
}

function plan() {
  try {
    const size = Number($("size").value);
    const c = planCoverage(size, size, Number($("t0").value), Number($("stride").value));
    blit($("cover"), c.rgba(), size, size);
    $("summary").textContent = c.summary();
    report(null);
  } catch (e) {
    report(e);
  }
}

await init();
$("gen").onclick = generate;
$("plan").onclick = plan;
$("dist").onchange = drawWindows;
$("image").onclick = (ev) => {
  const c = $("image");
  const b = c.getBoundingClientRect();
  prp = [((ev.clientX - b.left) * c.width) / b.width, ((ev.clientY - b.top) * c.height) / b.height];
  drawWindows();
};
generate();
plan();
