import { ApiClient, fetchTransport } from './client.js';
import { Controller } from './controller.js';
import { bindKeyboard, makeRenderer } from './dom.js';

const RETRY_MS = 3000;

async function boot(): Promise<void> {
  const root = document.getElementById('app');
  if (!root) {
    throw new Error('missing #app element');
  }
  const client = new ApiClient(fetchTransport());
  const schema = await client.schema();
  const controller = new Controller(client);
  controller.render = makeRenderer(root, schema, controller);
  bindKeyboard(controller);
  await controller.start();

  setInterval(() => {
    if (controller.state.offline || client.queuedCount > 0) {
      void controller.retry();
    }
  }, RETRY_MS);
}

void boot();
