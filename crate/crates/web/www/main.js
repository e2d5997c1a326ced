import init, { mapping, budget, cka } from "./pkg/vitexpand_web.js";

const $ = (id) => document.getElementById(id);
const hue = (i, n) => `hsl(${Math.round((360 * i) / Math.max(n, 1))} 55% 45%)`;

function guard(out, f) {
  try {
    f();
  } catch (e) {
    out.innerHTML = `<p class="error">${String(e)}</p>`;
  }
}

function drawMapping() {
  const out = $("m-out");
  guard(out, () => {
    const depth = Number($("m-depth").value);
    const m = JSON.parse(mapping($("m-strategy").value, depth, Number($("m-scale").value), $("m-subset").value));
    const cells = m.layers
      .map((l, i) => {
        const cls = ["layer", l.original ? "original" : "", l.source === null ? "fresh" : ""].join(" ");
        const label = l.source === null ? "new" : l.source;
        return `<div class="${cls}" style="background:${hue(l.source ?? 0, depth)}" title="position ${i}">${label}</div>`;
      })
      .join("");
    out.innerHTML = `<p>${m.depth} layers; outlined cells keep the original weights, grey cells start fresh.</p>
      <div class="layers">${cells}</div>`;
  });
}

function drawBudget() {
  const out = $("b-out");
  guard(out, () => {
    const b = JSON.parse(
      budget(Number($("b-depth").value), Number($("b-dim").value), Number($("b-rank").value), $("b-adjust").value),
    );
    let rows = `<tr><td>closed form (square linears)</td><td>${b.closed_form.toFixed(4)}</td></tr>`;
    if (b.counted) {
      const c = b.counted;
      rows += `<tr><td>counted block linears</td><td>${c.linear_fraction.toFixed(4)}</td></tr>
        <tr><td>counted whole model</td><td>${c.overall_fraction.toFixed(4)}
        (${c.shared_unique} / ${c.unshared_unique})</td></tr>`;
    } else {
      rows += `<tr><td colspan="2">width too large to instantiate; closed form only</td></tr>`;
    }
    out.innerHTML = `<p>Unique parameters relative to an unshared 2x expansion.</p><table>${rows}</table>`;
  });
}

function drawCka() {
  const out = $("c-out");
  out.textContent = "computing...";
  setTimeout(() =>
    guard(out, () => {
      const r = JSON.parse(
        cka($("c-strategy").value, Number($("c-scale").value), $("c-adjust").value, BigInt($("c-seed").value)),
      );
      const sources = r.sources.map((s) => (s === null ? "new" : s)).join(", ");
      out.innerHTML = `<p>Rows are expanded layers with sources [${sources}]; columns are parent layers.</p>${r.svg.replace(/^<\?xml[^>]*>\s*/, "")}`;
    }),
  );
}

await init();
for (const id of ["m-strategy", "m-depth", "m-scale", "m-subset"]) $(id).addEventListener("input", drawMapping);
for (const id of ["b-depth", "b-dim", "b-rank", "b-adjust"]) $(id).addEventListener("input", drawBudget);
$("c-run").addEventListener("click", drawCka);
drawMapping();
drawBudget();
drawCka();
