import init, { simulate_run, observability_spectrum, anchor_initialization } from "./pkg/cviro_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const COLORS = { truth: "#000", cviro: "#1f77b4", "vio-baseline": "#d62728", anchor: "#2ca02c" };

// Maps data coordinates onto a canvas with equal or independent axis scales.
function frame(canvas, xs, ys, equal) {
  const pad = 40;
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  let [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  if (x1 - x0 < 1e-9) { x0 -= 1; x1 += 1; }
  if (y1 - y0 < 1e-9) { y0 -= 1; y1 += 1; }
  const w = canvas.width - 2 * pad, h = canvas.height - 2 * pad;
  let sx = w / (x1 - x0), sy = h / (y1 - y0);
  if (equal) { sx = sy = Math.min(sx, sy); }
  const px = (x) => pad + (x - x0) * sx;
  const py = (y) => canvas.height - pad - (y - y0) * sy;
  ctx.strokeStyle = "#ccc";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#666";
  ctx.font = "11px sans-serif";
  ctx.fillText(x0.toPrecision(3), pad, canvas.height - pad + 14);
  ctx.fillText(x1.toPrecision(3), pad + w - 30, canvas.height - pad + 14);
  ctx.fillText(y0.toPrecision(3), 2, canvas.height - pad);
  ctx.fillText(y1.toPrecision(3), 2, pad + 10);
  return { ctx, px, py };
}

function polyline(f, pts, color) {
  f.ctx.strokeStyle = color;
  f.ctx.lineWidth = 1.5;
  f.ctx.beginPath();
  pts.forEach(([x, y], i) => (i ? f.ctx.lineTo(f.px(x), f.py(y)) : f.ctx.moveTo(f.px(x), f.py(y))));
  f.ctx.stroke();
}

function marker(f, x, y, color, kind) {
  const c = f.ctx, X = f.px(x), Y = f.py(y);
  c.strokeStyle = c.fillStyle = color;
  c.beginPath();
  if (kind === "x") { c.moveTo(X - 5, Y - 5); c.lineTo(X + 5, Y + 5); c.moveTo(X + 5, Y - 5); c.lineTo(X - 5, Y + 5); c.stroke(); }
  else if (kind === "tri") { c.moveTo(X, Y - 6); c.lineTo(X + 5, Y + 4); c.lineTo(X - 5, Y + 4); c.fill(); }
  else { c.arc(X, Y, 2, 0, 2 * Math.PI); c.fill(); }
}

function table(el, header, rows) {
  el.innerHTML = "<tr>" + header.map((h) => `<th>${h}</th>`).join("") + "</tr>" +
    rows.map((r) => "<tr>" + r.map((v) => `<td>${v}</td>`).join("") + "</tr>").join("");
}

function withStatus(id, work) {
  $(id).textContent = "running…";
  $(id).className = "status";
  // let the browser paint the status before the synchronous call
  setTimeout(() => {
    const t = performance.now();
    const out = JSON.parse(work());
    if (out.error) { $(id).textContent = out.error; $(id).className = "status err"; return; }
    $(id).textContent = `${(performance.now() - t).toFixed(0)} ms`;
  }, 20);
}

function runDemo() {
  withStatus("run-status", () => {
    const json = simulate_run(num("run-duration"), num("run-seed"), num("run-pixel"));
    const r = JSON.parse(json);
    if (r.error) return json;
    const all = [r.truth, ...r.estimators.map((e) => e.path)].flat();
    const xs = all.map((p) => p[1]).concat(r.anchors.map((a) => a[0]));
    const ys = all.map((p) => p[2]).concat(r.anchors.map((a) => a[1]));
    const f = frame($("run-xy"), xs, ys, true);
    polyline(f, r.truth.map((p) => [p[1], p[2]]), COLORS.truth);
    for (const e of r.estimators) polyline(f, e.path.map((p) => [p[1], p[2]]), COLORS[e.name]);
    r.anchors.forEach((a) => marker(f, a[0], a[1], COLORS.anchor, "tri"));
    for (const e of r.estimators) e.anchors.forEach((a) => marker(f, a.position[0], a.position[1], COLORS[e.name], "x"));

    const errs = r.estimators.flatMap((e) => e.position_error);
    const g = frame($("run-err"), errs.map((p) => p[0]), [0, ...errs.map((p) => p[1])], false);
    for (const e of r.estimators) polyline(g, e.position_error, COLORS[e.name]);
    g.ctx.fillStyle = "#333";
    g.ctx.fillText("position error [m] vs time [s]", 50, 30);

    table($("run-table"), ["estimator", "final error [m]", "ATE [m]", "mean PNEES", "mean ONEES", "anchor errors [m]"],
      r.estimators.map((e) => [e.name, e.final_position_error.toFixed(3), e.ate.toFixed(3),
        e.mean_pnees.toFixed(2), e.mean_onees.toFixed(2),
        e.anchors.map((a) => a.error.toFixed(3)).join(" ") || "–"]));
    return json;
  });
}

const OBS_SHOWN = 10;
function obsDemo() {
  $("obs-scale-val").textContent = num("obs-scale").toFixed(1);
  withStatus("obs-status", () => {
    const json = observability_spectrum(num("obs-scale"), num("obs-seed"));
    const s = JSON.parse(json);
    if (s.error) return json;
    const canvas = $("obs-plot");
    const c = canvas.getContext("2d");
    c.clearRect(0, 0, canvas.width, canvas.height);
    const lo = -18, pad = 40, h = canvas.height - 2 * pad;
    const y = (v) => pad + (Math.log10(Math.max(v, 1e-18)) / lo) * h;
    c.strokeStyle = "#ccc"; c.font = "11px sans-serif"; c.fillStyle = "#666";
    for (let e = 0; e >= lo; e -= 3) { c.beginPath(); c.moveTo(pad, y(10 ** e)); c.lineTo(canvas.width - 10, y(10 ** e)); c.stroke(); c.fillText(`1e${e}`, 2, y(10 ** e) + 4); }
    c.strokeStyle = "#b00"; c.setLineDash([4, 4]); c.beginPath(); c.moveTo(pad, y(1e-9)); c.lineTo(canvas.width - 10, y(1e-9)); c.stroke(); c.setLineDash([]);
    const groupW = (canvas.width - pad - 20) / s.entries.length;
    const palette = ["#1f77b4", "#17becf", "#d62728"];
    s.entries.forEach((e, gi) => {
      const tail = e.normalized_singular_values.slice(-OBS_SHOWN);
      const bw = groupW / (OBS_SHOWN + 2);
      tail.forEach((v, i) => {
        const x = pad + gi * groupW + (i + 1) * bw;
        c.fillStyle = v < 1e-9 ? "#999" : palette[gi];
        c.fillRect(x, pad, bw - 2, y(v) - pad);
      });
      c.fillStyle = "#222";
      c.fillText(`${e.label}: nullity ${e.nullity}`, pad + gi * groupW + bw, canvas.height - 15);
    });
    table($("obs-table"), ["system", "nullity", "max |O·N|/|O|", "yaw", "x", "y", "z"],
      s.entries.map((e) => [e.label, e.nullity, e.max_residual.toExponential(2), ...e.per_direction.map((v) => v.toExponential(1))]));
    return json;
  });
}

function anchorDemo() {
  withStatus("anc-status", () => {
    const json = anchor_initialization(num("anc-n"), num("anc-sigma"), num("anc-spread"), num("anc-seed"));
    const a = JSON.parse(json);
    const pts = [...a.tags, a.truth, ...(a.estimate ? [a.estimate] : [])];
    const f = frame($("anc-plot"), pts.map((p) => p[0]), pts.map((p) => p[1]), true);
    a.tags.forEach((t) => marker(f, t[0], t[1], "#888", "dot"));
    marker(f, a.truth[0], a.truth[1], COLORS.anchor, "tri");
    if (a.estimate) {
      marker(f, a.estimate[0], a.estimate[1], COLORS.cviro, "x");
      const [sx, sy] = a.sigma || [0, 0];
      f.ctx.strokeStyle = COLORS.cviro;
      f.ctx.strokeRect(f.px(a.estimate[0] - 3 * sx), f.py(a.estimate[1] + 3 * sy),
        f.px(a.estimate[0] + 3 * sx) - f.px(a.estimate[0] - 3 * sx), f.py(a.estimate[1] - 3 * sy) - f.py(a.estimate[1] + 3 * sy));
      $("anc-out").innerHTML = `error ${a.error.toFixed(3)} m, σ = [${a.sigma.map((v) => v.toFixed(3)).join(", ")}] m, ` +
        `rms residual ${a.rms.toFixed(3)} m, ${a.iterations} Gauss-Newton iterations (box: 3σ in x-y)`;
    } else {
      $("anc-out").innerHTML = `<span class="err">not initialized: ${a.message}</span>`;
    }
    return json;
  });
}

await init();
$("run-go").onclick = runDemo;
$("obs-scale").oninput = obsDemo;
$("obs-seed").onchange = obsDemo;
$("anc-go").onclick = anchorDemo;
obsDemo();
anchorDemo();
