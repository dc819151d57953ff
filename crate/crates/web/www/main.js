import init, { fixed_point_map, equilibrium_densities, choice_field } from "./pkg/minlqg_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c"];
let lastR = null;

function params() {
  return { q: Number($("q").value), sigma: Number($("sigma").value) };
}

function status(text) {
  $("status").textContent = text;
}

function frame(canvas, xr, yr) {
  const ctx = canvas.getContext("2d");
  const pad = 36;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.fillText(xr[0].toFixed(1), pad, canvas.height - pad + 14);
  ctx.fillText(xr[1].toFixed(1), pad + w - 20, canvas.height - pad + 14);
  ctx.fillText(yr[1].toPrecision(2), 2, pad + 4);
  ctx.fillText(yr[0].toPrecision(2), 2, pad + h);
  const sx = (x) => pad + ((x - xr[0]) / (xr[1] - xr[0])) * w;
  const sy = (y) => pad + h - ((y - yr[0]) / (yr[1] - yr[0])) * h;
  return { ctx, sx, sy };
}

function line(plot, xs, ys, color, dash = []) {
  const { ctx, sx, sy } = plot;
  ctx.strokeStyle = color;
  ctx.setLineDash(dash);
  ctx.beginPath();
  xs.forEach((x, i) => (i ? ctx.lineTo(sx(x), sy(ys[i])) : ctx.moveTo(sx(x), sy(ys[i]))));
  ctx.stroke();
  ctx.setLineDash([]);
}

function run(label, f) {
  status(`${label}...`);
  // Let the status paint before the solver blocks the thread.
  setTimeout(() => {
    const t0 = performance.now();
    try {
      const msg = f();
      status(`${msg} (${((performance.now() - t0) / 1000).toFixed(2)} s)`);
    } catch (e) {
      status(`error: ${e.message ?? e}`);
    }
  }, 10);
}

function drawMap() {
  const { q, sigma } = params();
  const flat = fixed_point_map(q, sigma, 41);
  const rs = [], gs = [];
  for (let i = 0; i < flat.length; i += 2) {
    rs.push(flat[i]);
    gs.push(flat[i + 1]);
  }
  const plot = frame($("g-plot"), [0, 1], [0, 1]);
  line(plot, [0, 1], [0, 1], "#999", [4, 4]);
  line(plot, rs, gs, COLORS[0]);
  let crossings = 0;
  for (let i = 1; i < rs.length; i++) {
    if ((gs[i - 1] - rs[i - 1]) * (gs[i] - rs[i]) <= 0) crossings++;
  }
  return `Q = ${q}, σ = ${sigma}: about ${crossings} crossing(s) of the diagonal`;
}

function drawEquilibrium() {
  const { q, sigma } = params();
  const eq = equilibrium_densities(q, sigma);
  lastR = { q, sigma, r: eq.r };
  const x = eq.x;
  const dens = [0, 1, 2].map((k) => eq.density(k));
  const ymax = Math.max(...dens.map((d) => Math.max(...d)));
  const dp = frame($("density-plot"), [x[0], x[x.length - 1]], [0, ymax * 1.05]);
  dens.forEach((d, k) => line(dp, x, d, COLORS[k]));

  const t = eq.times, mean = eq.mean, tracked = eq.tracked;
  const lo = Math.min(...mean, ...tracked), hi = Math.max(...mean, ...tracked);
  const pp = frame($("path-plot"), [t[0], t[t.length - 1]], [Math.min(lo, -1), Math.max(hi, 1)]);
  line(pp, t, mean, COLORS[0]);
  line(pp, t, tracked, COLORS[1], [5, 4]);
  eq.free();
  return `equilibrium r* = ${lastR.r.toFixed(3)}`;
}

function drawField() {
  const { q, sigma } = params();
  if (!lastR || lastR.q !== q || lastR.sigma !== sigma) drawEquilibrium();
  const nt = 80, nx = 120;
  const f = choice_field(q, sigma, lastR.r, nt, nx);
  const canvas = $("field-plot");
  const ctx = canvas.getContext("2d");
  const cw = canvas.width / nt, ch = canvas.height / nx;
  for (let i = 0; i < nt; i++) {
    for (let k = 0; k < nx; k++) {
      const w = f[i * nx + k];
      ctx.fillStyle = `rgb(${Math.round(255 * (1 - w))}, 80, ${Math.round(255 * w)})`;
      ctx.fillRect(i * cw, canvas.height - (k + 1) * ch, cw + 1, ch + 1);
    }
  }
  return `choice field at r = ${lastR.r.toFixed(3)}, x ∈ [-15, 15]`;
}

for (const id of ["q", "sigma"]) {
  $(id).addEventListener("input", () => ($(`${id}-out`).textContent = $(id).value));
}

await init();
$("map").addEventListener("click", () => run("computing G", drawMap));
$("solve").addEventListener("click", () => run("bisecting", drawEquilibrium));
$("field").addEventListener("click", () => run("evaluating weights", drawField));
run("bisecting", drawEquilibrium);
