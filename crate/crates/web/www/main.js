import init, { det_curve, mix_pool, synthetic_utterance } from "./pkg/axvec_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function call(f, out) {
  try {
    out.classList.remove("error");
    return JSON.parse(f());
  } catch (e) {
    out.textContent = String(e.message ?? e);
    out.classList.add("error");
    return null;
  }
}

// Probit axis between 0.1% and 50%, via an inverse error function approximation.
function probit(p) {
  const q = Math.min(Math.max(p, 1e-3), 0.5);
  const x = 2 * q - 1;
  const a = 0.147;
  const l = Math.log(1 - x * x);
  const t = 2 / (Math.PI * a) + l / 2;
  return Math.SQRT2 * Math.sign(x) * Math.sqrt(Math.sqrt(t * t - l / a) - t);
}

function drawDet() {
  const out = $("dstats");
  const r = call(() => det_curve(num("tm"), num("ts"), num("nm"), num("ns"), num("nt"), num("pt"), num("dseed")), out);
  const c = $("det").getContext("2d");
  const W = c.canvas.width, M = 40, S = W - 2 * M;
  c.clearRect(0, 0, W, W);
  if (!r) return;
  out.textContent =
    `EER ${(100 * r.eer).toFixed(2)}%   minDCF ${r.min_dcf.toFixed(4)}   actDCF ${r.act_dcf.toFixed(4)}` +
    `   Bayes threshold ${r.threshold.toFixed(2)}   (${r.n_target} target / ${r.n_nontarget} nontarget)`;
  const lo = probit(1e-3), hi = probit(0.5);
  const pos = (p) => ((probit(p) - lo) / (hi - lo)) * S;
  c.strokeStyle = "#ddd";
  c.fillStyle = "#555";
  c.font = "10px sans-serif";
  for (const t of [0.001, 0.01, 0.05, 0.1, 0.2, 0.4]) {
    const v = pos(t);
    c.beginPath(); c.moveTo(M + v, M); c.lineTo(M + v, M + S); c.stroke();
    c.beginPath(); c.moveTo(M, M + S - v); c.lineTo(M + S, M + S - v); c.stroke();
    c.fillText(`${t * 100}`, M + v - 6, M + S + 14);
    c.fillText(`${t * 100}`, 4, M + S - v + 3);
  }
  c.fillText("false alarm (%)", M + S / 2 - 35, W - 6);
  c.fillText("miss (%)", 4, M - 10);
  c.strokeStyle = "#888";
  c.strokeRect(M, M, S, S);
  c.strokeStyle = "#1f77b4";
  c.lineWidth = 2;
  c.beginPath();
  r.curve.forEach(([fa, miss], i) => {
    const x = M + pos(fa), y = M + S - pos(miss);
    i ? c.lineTo(x, y) : c.moveTo(x, y);
  });
  c.stroke();
  c.lineWidth = 1;
  const e = pos(r.eer);
  c.fillStyle = "#d62728";
  c.beginPath(); c.arc(M + e, M + S - e, 4, 0, 2 * Math.PI); c.fill();
}

const POOL = ["smooth", "identity", "derivative", "curvature"];
const COLORS = ["#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd"];

function plotLine(c, values, x0, y0, w, h, lo, hi, color, start = 0, total = values.length) {
  c.strokeStyle = color;
  c.beginPath();
  values.forEach((v, i) => {
    const x = x0 + ((start + i) / Math.max(total - 1, 1)) * w;
    const y = y0 + h - ((v - lo) / (hi - lo || 1)) * h;
    i ? c.lineTo(x, y) : c.moveTo(x, y);
  });
  c.stroke();
}

function drawMix() {
  const beta = POOL.map((_, i) => num(`beta${i}`));
  POOL.forEach((_, i) => ($(`bv${i}`).textContent = beta[i].toFixed(2)));
  const err = $("mstats");
  const r = call(() => mix_pool(Float64Array.from(beta), num("mseed")), err);
  if (!r) return;
  err.textContent = "";
  const k = $("kernels").getContext("2d");
  k.clearRect(0, 0, k.canvas.width, k.canvas.height);
  const all = r.pool.flat().concat(r.mixed);
  const lo = Math.min(...all, -0.6), hi = Math.max(...all, 1.0);
  r.pool.forEach((taps, i) => plotLine(k, taps, 10, 10, 280, 200, lo, hi, COLORS[i]));
  k.lineWidth = 3;
  plotLine(k, r.mixed, 10, 10, 280, 200, lo, hi, "#d62728");
  k.lineWidth = 1;
  k.fillStyle = "#d62728";
  k.fillText("mixed filter", 12, 14);

  const s = $("signal").getContext("2d");
  s.clearRect(0, 0, s.canvas.width, s.canvas.height);
  const vals = r.input.concat(r.output);
  const a = Math.min(...vals), b = Math.max(...vals);
  plotLine(s, r.input, 10, 10, 600, 200, a, b, "#bbb");
  s.lineWidth = 2;
  plotLine(s, r.output, 10, 10, 600, 200, a, b, "#d62728", r.offset, r.input.length);
  s.lineWidth = 1;
  s.fillStyle = "#555";
  s.fillText("input track (grey) and filtered output (red)", 14, 14);
}

function drawFeatures() {
  const out = $("ustats");
  const r = call(() => synthetic_utterance($("cond").value, num("spk"), num("useed")), out);
  const c = $("feats").getContext("2d");
  c.clearRect(0, 0, c.canvas.width, c.canvas.height);
  if (!r) return;
  out.textContent = `${r.utt_id}: ${r.frames} frames x ${r.dims} dims, ${r.condition}`;
  const cw = c.canvas.width / r.frames, ch = c.canvas.height / r.dims;
  for (let t = 0; t < r.frames; t++) {
    for (let d = 0; d < r.dims; d++) {
      const v = Math.tanh(r.values[t * r.dims + d] / 2.5);
      const red = v > 0 ? 255 : Math.round(255 * (1 + v));
      const blue = v < 0 ? 255 : Math.round(255 * (1 - v));
      const green = Math.round(255 * (1 - Math.abs(v)));
      c.fillStyle = `rgb(${red},${green},${blue})`;
      c.fillRect(t * cw, c.canvas.height - (d + 1) * ch, Math.ceil(cw), Math.ceil(ch));
    }
  }
}

await init();

const betas = $("betas");
POOL.forEach((name, i) => {
  const l = document.createElement("label");
  l.innerHTML = `<span style="color:${COLORS[i]}">${name}</span>
    <input id="beta${i}" type="range" min="-1.5" max="1.5" step="0.05" value="${i === 1 ? 1 : 0}">
    <span id="bv${i}"></span>`;
  betas.appendChild(l);
});

for (const id of ["tm", "ts", "nm", "ns", "nt", "pt", "dseed"]) $(id).addEventListener("input", drawDet);
for (const id of ["mseed", ...POOL.map((_, i) => `beta${i}`)]) $(id).addEventListener("input", drawMix);
for (const id of ["spk", "cond", "useed"]) $(id).addEventListener("input", drawFeatures);

drawDet();
drawMix();
drawFeatures();
