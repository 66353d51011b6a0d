/**
 * Response input widgets, one per task response type.
 *
 * read() validates with the same rules the server enforces and resolves
 * to the response body to submit. Media widgets upload to the file store
 * first and resolve to the returned link; an upload failure rejects so
 * the caller can prompt a retry without a partial submit.
 */

import { Api, TaskCard } from "./api.js";

export class WidgetError extends Error {}

export interface Widget {
  root: HTMLElement;
  read(): Promise<unknown>;
}

export function buildWidget(task: TaskCard, doc: Document, api: Api): Widget {
  switch (task.responseType) {
    case "text":
      return textWidget(doc);
    case "numeric":
      return numericWidget(doc);
    case "singleChoice":
      return choiceWidget(doc, task.choices ?? [], "radio");
    case "multiChoice":
      return choiceWidget(doc, task.choices ?? [], "checkbox");
    case "photo":
      return mediaWidget(doc, api, "image/*", "image/jpeg", "photo");
    case "audio":
      return mediaWidget(doc, api, "audio/*", "audio/webm", "audio recording");
  }
}

function textWidget(doc: Document): Widget {
  const root = doc.createElement("div");
  const area = doc.createElement("textarea");
  area.id = "response-input";
  area.rows = 5;
  root.appendChild(area);
  return {
    root,
    async read() {
      const value = area.value.trim();
      if (!value) throw new WidgetError("write your answer first");
      return value;
    },
  };
}

function numericWidget(doc: Document): Widget {
  const root = doc.createElement("div");
  const input = doc.createElement("input");
  input.type = "number";
  input.id = "response-input";
  root.appendChild(input);
  return {
    root,
    async read() {
      const raw = input.value.trim();
      const value = Number(raw);
      if (raw === "" || !Number.isFinite(value)) {
        throw new WidgetError("enter a number");
      }
      return value;
    },
  };
}

function choiceWidget(doc: Document, choices: string[], kind: "radio" | "checkbox"): Widget {
  const root = doc.createElement("div");
  const inputs: HTMLInputElement[] = [];
  choices.forEach((choice, index) => {
    const label = doc.createElement("label");
    const input = doc.createElement("input");
    input.type = kind;
    input.name = "choice";
    input.value = String(index);
    label.appendChild(input);
    label.appendChild(doc.createTextNode(` ${choice}`));
    root.appendChild(label);
    inputs.push(input);
  });
  return {
    root,
    async read() {
      const picked = inputs
        .map((input, index) => (input.checked ? index : -1))
        .filter((index) => index >= 0);
      if (kind === "radio") {
        if (picked.length !== 1) throw new WidgetError("pick one option");
        return picked[0];
      }
      if (picked.length === 0) throw new WidgetError("pick at least one option");
      return picked;
    },
  };
}

function mediaWidget(
  doc: Document,
  api: Api,
  accept: string,
  fallbackType: string,
  noun: string,
): Widget {
  const root = doc.createElement("div");
  const input = doc.createElement("input");
  input.type = "file";
  input.accept = accept;
  input.id = "response-input";
  root.appendChild(input);
  return {
    root,
    async read() {
      const file = input.files && input.files[0];
      if (!file) throw new WidgetError(`pick a ${noun} first`);
      const encoded = await encodeBase64(file);
      try {
        const reply = await api.upload(file.type || fallbackType, encoded);
        return reply.link;
      } catch {
        throw new WidgetError("upload failed, try again");
      }
    },
  };
}

async function encodeBase64(file: Blob): Promise<string> {
  const bytes = await readBytes(file);
  let binary = "";
  const chunk = 0x8000;
  for (let i = 0; i < bytes.length; i += chunk) {
    binary += String.fromCharCode(...bytes.subarray(i, i + chunk));
  }
  return btoa(binary);
}

function readBytes(file: Blob): Promise<Uint8Array> {
  // older mobile WebKit has no Blob.arrayBuffer
  if (typeof file.arrayBuffer === "function") {
    return file.arrayBuffer().then((buffer) => new Uint8Array(buffer));
  }
  return new Promise((resolve, reject) => {
    const reader = new FileReader();
    reader.onerror = () => reject(reader.error);
    reader.onload = () => resolve(new Uint8Array(reader.result as ArrayBuffer));
    reader.readAsArrayBuffer(file);
  });
}
