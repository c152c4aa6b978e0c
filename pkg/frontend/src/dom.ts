import type { Controller } from './controller.js';
import { purityBadge, type UiSessionState } from './state.js';
import type { Schema } from './types.js';

const PLACEHOLDER =
  'data:image/svg+xml,' +
  encodeURIComponent(
    '<svg xmlns="http://www.w3.org/2000/svg" width="64" height="64">' +
      '<rect width="64" height="64" fill="#333"/>' +
      '<text x="32" y="36" fill="#999" font-size="10" text-anchor="middle">no img</text></svg>',
  );

export function bindKeyboard(controller: Controller): void {
  document.addEventListener('keydown', (event) => {
    if (event.metaKey || event.ctrlKey || event.altKey) {
      return;
    }
    controller.handleKey(event.key);
    if (event.key === 'Enter' || event.key.startsWith('Arrow')) {
      event.preventDefault();
    }
  });
}

export function makeRenderer(root: HTMLElement, schema: Schema, controller: Controller) {
  root.innerHTML = `
    <div id="banner" class="banner hidden"></div>
    <header>
      <span id="title">mcae annotate</span>
      <span id="progress"></span>
    </header>
    <div id="suggestion"></div>
    <div id="keys"></div>
    <div id="grid" class="grid"></div>
    <div id="message" class="message"></div>
  `;
  const banner = root.querySelector('#banner') as HTMLElement;
  const progressEl = root.querySelector('#progress') as HTMLElement;
  const suggestion = root.querySelector('#suggestion') as HTMLElement;
  const keys = root.querySelector('#keys') as HTMLElement;
  const grid = root.querySelector('#grid') as HTMLElement;
  const message = root.querySelector('#message') as HTMLElement;

  return (state: UiSessionState): void => {
    if (state.offline || state.queued > 0) {
      banner.classList.remove('hidden');
      banner.textContent = `server unreachable; ${state.queued} decision(s) queued locally`;
    } else {
      banner.classList.add('hidden');
    }
    progressEl.textContent =
      `${state.progress.decided} decided / ${state.progress.remaining} remaining / ` +
      `${state.progress.masks_labeled} masks labeled`;

    if (state.done) {
      suggestion.textContent = 'all clusters decided';
      grid.innerHTML = '';
      keys.innerHTML = '';
      message.textContent = '';
      return;
    }
    const view = state.view;
    if (!view) {
      suggestion.textContent = 'loading…';
      return;
    }

    suggestion.innerHTML =
      `cluster <b>#${view.cluster_id}</b> (${view.stage}) ` +
      `<span class="badge">${purityBadge(view.purity)}</span> suggested: ` +
      `<b>${view.suggested_class.name}</b>`;

    keys.innerHTML = schema.classes
      .map((cls) => {
        const selected = state.selectedClass === cls.id ? ' selected' : '';
        const hinted = view.suggested_class.id === cls.id ? ' hinted' : '';
        return `<span class="key${selected}${hinted}" data-class="${cls.id}">${cls.id} ${cls.name}</span>`;
      })
      .join(' ');
    keys.querySelectorAll('.key').forEach((el) =>
      el.addEventListener('click', () => controller.handleKey(el.getAttribute('data-class')!)),
    );

    grid.innerHTML = '';
    view.members.forEach((member, index) => {
      const cell = document.createElement('div');
      cell.className = 'cell';
      if (state.excluded.has(member.id)) {
        cell.classList.add('excluded');
      }
      if (index === state.focusIndex) {
        cell.classList.add('focused');
      }
      const img = document.createElement('img');
      img.loading = 'lazy'; // thumbnails requested lazily
      img.src = member.thumbnail;
      img.onerror = () => {
        img.onerror = null;
        img.src = PLACEHOLDER; // missing thumbnail never blocks labeling
      };
      cell.appendChild(img);
      const caption = document.createElement('span');
      caption.textContent = `#${member.id} (${member.area}px)`;
      cell.appendChild(caption);
      cell.addEventListener('click', () => controller.toggleExclude(member.id));
      grid.appendChild(cell);
    });

    message.textContent = state.message ?? '';
  };
}
